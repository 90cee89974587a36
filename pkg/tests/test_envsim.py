import math

import numpy as np
import pytest
from scipy import stats

from srslab.envsim import (
    Env,
    EnvConfig,
    EnvState,
    RewardMode,
    TabularMdp,
    UsageError,
    bellman_backup,
    oracle_greedy_return,
    random_policy_return,
    random_tabular_mdp,
    value_iteration,
)
from srslab.numkit import ConfigurationError


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


@pytest.fixture(scope="module")
def env():
    return Env()


def test_catalog_deterministic_and_read_only():
    a, b = Env(EnvConfig(catalog_seed=5)), Env(EnvConfig(catalog_seed=5))
    np.testing.assert_array_equal(a.catalog, b.catalog)
    assert not np.array_equal(a.catalog, Env(EnvConfig(catalog_seed=6)).catalog)
    with pytest.raises(ValueError):
        a.catalog[0, 0] = 1.0


def test_small_catalog_rows_are_unit_vectors():
    env = Env(EnvConfig(dim=2, n_items=2))
    np.testing.assert_allclose(np.linalg.norm(env.catalog, axis=1), 1.0, atol=1e-9)


def test_catalog_pairwise_inner_products_centered(env):
    g = env.catalog @ env.catalog.T
    iu = np.triu_indices(env.n_items, 1)
    vals = g[iu]
    # <e_i, e_j> for independent isotropic unit vectors has mean 0 and variance 1/d
    sigma = math.sqrt(1.0 / env.config.dim / len(vals))
    assert abs(vals.mean()) < 3 * sigma


@pytest.mark.parametrize("field, value", [("dim", 0), ("n_items", 0), ("drift", 1.0), ("gamma", 1.0),
                                          ("leave_base", -0.1), ("horizon", 0)])
def test_invalid_config_rejected(field, value):
    with pytest.raises(ConfigurationError, match=field):
        Env(EnvConfig(**{field: value}))


def test_reset_deterministic_and_fresh(env):
    a, b = env.reset(123), env.reset(123)
    np.testing.assert_array_equal(a.u, b.u)
    assert a.t == 0 and a.last_purchase == 0 and not a.done
    assert abs(np.linalg.norm(a.u) - 1.0) < 1e-9


def test_reset_is_isotropic(env):
    us = np.array([env.reset(s).u for s in range(10_000)])
    sigma = math.sqrt(1.0 / env.config.dim / len(us))
    assert np.all(np.abs(us.mean(axis=0)) < 3 * sigma)


def test_true_prob_formula(env):
    d = env.config.dim
    # a user orthogonal to item 0
    e = env.catalog[0]
    u = np.eye(d)[0] - e[0] * e
    u /= np.linalg.norm(u)
    assert env.prob_from_user(u, 0) == pytest.approx(0.18243, abs=5e-6)
    assert env.prob_from_user(e, 0) == pytest.approx(0.92414, abs=5e-6)
    assert env.prob_from_user(e, 0) == pytest.approx(sigmoid(2.5), abs=1e-15)


def test_zero_affinity_makes_items_equivalent():
    env = Env(EnvConfig(affinity=0.0))
    state = env.reset(1)
    ps = {env.true_prob(state, a) for a in range(env.n_items)}
    assert len(ps) == 1
    assert ps.pop() == pytest.approx(sigmoid(-1.5), abs=1e-15)


def test_true_prob_rejects_bad_item(env):
    with pytest.raises(IndexError):
        env.true_prob(env.reset(0), env.n_items)


def test_deterministic_reward_equals_true_prob(env):
    state = env.reset(7)
    rng = np.random.default_rng(0)
    while not state.done:
        a = int(rng.integers(env.n_items))
        out = env.step(state, a, RewardMode.DETERMINISTIC)
        assert out.reward == out.true_prob == env.true_prob(state, a)
        state = out.next_state


def test_stochastic_reward_matches_purchase(env):
    state = env.reset(8)
    while not state.done:
        out = env.step(state, 3, "stochastic")
        assert out.reward == float(out.purchased)
        assert abs(np.linalg.norm(out.next_state.u) - 1.0) < 1e-9
        assert out.next_state.t <= env.config.horizon
        state = out.next_state


def test_both_modes_share_dynamics(env):
    a, b = env.reset(9), env.reset(9)
    while not a.done:
        oa = env.step(a, 4, "stochastic")
        ob = env.step(b, 4, "deterministic")
        assert oa.purchased == ob.purchased and oa.done == ob.done
        np.testing.assert_array_equal(oa.next_state.u, ob.next_state.u)
        a, b = oa.next_state, ob.next_state


def test_bernoulli_purchase_frequency():
    env = Env()
    # a user state whose purchase probability for item 0 is exactly 0.3
    target = 0.3
    e = env.catalog[0]
    c = (math.log(target / (1 - target)) - env.config.bias) / env.config.affinity
    other = np.eye(env.config.dim)[1] - e[1] * e
    other /= np.linalg.norm(other)
    u = c * e + math.sqrt(1 - c * c) * other
    p = env.prob_from_user(u, 0)
    assert p == pytest.approx(target, abs=1e-12)
    n = 100_000
    hits = sum(env.step(EnvState(u=u, rng=np.random.default_rng(i)), 0, "stochastic").purchased for i in range(n))
    assert abs(hits / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_no_drift_no_noise_keeps_user():
    env = Env(EnvConfig(drift=0.0, noise_scale=0.0))
    state = env.reset(3)
    for seed in range(50):
        s = EnvState(u=state.u.copy(), rng=np.random.default_rng(seed))
        out = env.step(s, 0, "stochastic")
        if not out.purchased:
            np.testing.assert_allclose(out.next_state.u, state.u, atol=1e-15)


def test_stepping_terminal_state_is_usage_error(env):
    state = env.reset(0)
    state.done = True
    with pytest.raises(UsageError):
        env.step(state, 0, "stochastic")


def test_select_item_cases():
    env = Env(EnvConfig(dim=5, n_items=5))
    env.catalog = np.eye(5)
    assert env.select_item(np.eye(5)[3]) == 3
    assert env.select_item(np.zeros(5)) == 0
    with pytest.raises(ValueError):
        env.select_item(np.array([np.nan, 0, 0, 0, 0]))


def test_continuous_step_delegates(env):
    w = np.random.default_rng(4).normal(size=env.config.dim)
    item = int(np.argmax([w @ e for e in env.catalog]))
    a = env.continuous_step(env.reset(5), w, "stochastic")
    b = env.step(env.reset(5), item, "stochastic")
    assert a.item == b.item == item
    assert a.reward == b.reward
    np.testing.assert_array_equal(a.next_state.u, b.next_state.u)


def test_rollout_batch_matches_sequential_statistics(env):
    # vectorized rollouts and step() implement the same dynamics: compare means
    n = 2000
    fixed = lambda feats, users: np.full(len(feats), 7)
    batch = env.rollout_batch(fixed, n, 11, "deterministic")
    seq = []
    for i in range(n):
        s, total = env.reset(10_000 + i), 0.0
        while not s.done:
            o = env.step(s, 7, "deterministic")
            total += o.reward
            s = o.next_state
        seq.append(total)
    t = stats.ttest_ind(batch, seq, equal_var=False)
    assert t.pvalue > 1e-3


def test_single_item_oracle_equals_forced_policy():
    env = Env(EnvConfig(n_items=1))
    forced = env.rollout_batch(lambda f, u: np.zeros(len(f), dtype=int), 500, 3).mean()
    assert oracle_greedy_return(env, 500, 3) == forced


def test_zero_affinity_oracle_matches_random():
    env = Env(EnvConfig(affinity=0.0))
    o = env.rollout_batch(env.greedy_oracle_policy, 3000, 1)
    r = env.rollout_batch(env.random_policy(5), 3000, 2)
    half = 1.96 * math.sqrt(o.var(ddof=1) / len(o) + r.var(ddof=1) / len(r))
    assert abs(o.mean() - r.mean()) < half


def test_oracle_beats_random(env):
    o = env.rollout_batch(env.greedy_oracle_policy, 1000, 1)
    r = env.rollout_batch(env.random_policy(3), 1000, 2)
    lo = o.mean() - 1.96 * o.std(ddof=1) / math.sqrt(len(o))
    hi = r.mean() + 1.96 * r.std(ddof=1) / math.sqrt(len(r))
    assert lo > hi
    assert oracle_greedy_return(env, 1000, 1) > random_policy_return(env, 1000, 1)


def test_tabular_validation():
    with pytest.raises(ConfigurationError):
        TabularMdp(np.full((1, 1, 1), 0.9), np.zeros((1, 1)), 0.5)
    with pytest.raises(ConfigurationError):
        TabularMdp(np.ones((1, 1, 1)), np.full((1, 1), 1.5), 0.5)
    with pytest.raises(ConfigurationError):
        TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 1.0)


def test_value_iteration_myopic_and_geometric():
    mdp = random_tabular_mdp(3, 2, 0.0, 1)
    np.testing.assert_array_equal(value_iteration(mdp), mdp.R)
    loop = TabularMdp(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9)
    assert value_iteration(loop, tol=1e-10)[0, 0] == pytest.approx(10.0, abs=1e-8)


def test_value_iteration_matches_brute_force_backup():
    mdp = random_tabular_mdp(3, 2, 0.9, 42)
    q = np.zeros((3, 2))
    for _ in range(200):
        nxt = np.empty_like(q)
        for s in range(3):
            for a in range(2):
                nxt[s, a] = mdp.R[s, a] + mdp.gamma * sum(mdp.P[s, a, s2] * max(q[s2]) for s2 in range(3))
        q = nxt
    np.testing.assert_allclose(value_iteration(mdp, tol=1e-10), q, atol=1e-6)


def test_terminal_states_have_no_continuation():
    mdp = random_tabular_mdp(3, 2, 0.9, 7)
    mdp = TabularMdp(mdp.P, mdp.R, mdp.gamma, terminal={2})
    q = value_iteration(mdp)
    np.testing.assert_allclose(bellman_backup(mdp, q), q, atol=1e-7)
    expected = mdp.R + mdp.gamma * mdp.P[:, :, :2] @ q[:2].max(axis=1)
    np.testing.assert_allclose(q, expected, atol=1e-7)
