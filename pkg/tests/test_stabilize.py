import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srslab.agents import AgentConfig, Batch, DQNAgent, Transition
from srslab.envsim import Env
from srslab.numkit import ConfigurationError, NetworkParams, NonFiniteError, grad_check_flat, min_relu_margin
from srslab.stabilize import (
    CLAMP,
    EstimatorConfig,
    OracleEstimator,
    ProvenanceError,
    RewardEstimator,
    SharedEmbedder,
    StabilizedBatch,
    bce,
    estimate,
    estimator_loss_and_grads,
    estimator_update,
    head_input,
    shared_forward,
    stabilize_batch,
)


def tiny_estimator(state_dim=1, items=((1.0,), (-1.0,)), cross=False, hidden=(), seed=0, **kw):
    cfg = EstimatorConfig(hidden=hidden, cross=cross, **kw)
    return RewardEstimator(state_dim, np.array(items), np.random.default_rng(seed), cfg)


def make_batch(states, items, rewards, n_items=2):
    states = np.asarray(states, dtype=float)
    n = len(states)
    return Batch(states, np.asarray(items), np.asarray(items, dtype=np.intp), np.asarray(rewards, dtype=float),
                 states + 1.0, np.zeros(n, dtype=bool))


def env_batch(env, n, seed):
    """Transitions from random play, with stochastic observed rewards."""
    rng = np.random.default_rng(seed)
    out, state = [], env.reset(seed)
    while len(out) < n:
        if state.done:
            state = env.reset(int(rng.integers(2**32)))
        x, a = env.features(state), int(rng.integers(env.n_items))
        step = env.step(state, a, "stochastic")
        out.append(Transition(x, a, step.reward, env.features(step.next_state), step.done))
        state = step.next_state
    return Batch.from_transitions(out)


def jitter_biases(nets, seed):
    # zero biases put dead-relu rows exactly on the kink; move them off it
    rng = np.random.default_rng(seed)
    for net in nets:
        for b in net.biases:
            b[...] = rng.normal(0.0, 0.1, size=b.shape)


class ConstantEstimator:
    trainable = False

    def __init__(self, value):
        self.value = value

    def predict(self, states, items):
        return np.full(len(items), self.value)


# --------------------------------------------------------------------------- estimator


def test_zero_weight_estimator_outputs_half():
    est = RewardEstimator(5, np.random.default_rng(1).normal(size=(4, 3)), np.random.default_rng(0))
    est.net.flat[:] = 0.0
    s = np.random.default_rng(2).normal(size=(7, 5))
    np.testing.assert_array_equal(est.predict(s, [0, 1, 2, 3, 0, 1, 2]), 0.5)


def test_estimate_is_pure():
    env = Env()
    est = RewardEstimator(env.feature_dim, env.catalog, np.random.default_rng(0))
    b = env_batch(env, 20, 1)
    before = est.net.flat.copy()
    first = est.predict(b.states, b.items)
    np.testing.assert_array_equal(first, est.predict(b.states, b.items))
    np.testing.assert_array_equal(before, est.net.flat)
    assert isinstance(estimate(est, b.states[0], env.catalog[b.items[0]]), float)


def test_estimate_dimension_mismatch():
    est = tiny_estimator(state_dim=3)
    with pytest.raises(ConfigurationError):
        estimate(est, np.zeros(4), np.zeros(1))
    with pytest.raises(ConfigurationError):
        estimate(est, np.zeros(3), np.zeros(2))


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 2**16))
def test_output_always_in_unit_interval(scale, seed):
    est = RewardEstimator(4, np.random.default_rng(seed).normal(size=(3, 2)), np.random.default_rng(seed))
    s = scale * np.random.default_rng(seed + 1).normal(size=(16, 4))
    r = est.predict(s, np.arange(16) % 3)
    assert np.all((r >= 0.0) & (r <= 1.0))


def test_bce_fixed_point_at_clamp_floor():
    est = tiny_estimator()
    # logit = 30 * item feature: item 0 -> ~1, item 1 -> ~0
    est.net = NetworkParams.from_layers([(np.array([[0.0, 30.0]]), np.zeros(1), "sigmoid")])
    s, items = np.zeros((2, 1)), np.array([0, 1])
    loss, grads, _ = estimator_loss_and_grads(est, s, est.item_features[items], np.array([1.0, 0.0]))
    assert loss == pytest.approx(-np.log(1 - CLAMP), rel=1e-6)
    assert np.abs(grads.flat).max() < 1e-12


def test_hand_gradient_single_example():
    est = tiny_estimator(state_dim=2, items=((0.5,),))
    w, b = np.array([[0.3, -0.2, 0.7]]), np.array([0.1])
    est.net = NetworkParams.from_layers([(w, b, "sigmoid")])
    s, a, r = np.array([[1.0, 2.0]]), np.array([[0.5]]), np.array([1.0])
    x = np.array([1.0, 2.0, 0.5])
    p = 1.0 / (1.0 + np.exp(-(w[0] @ x + b[0])))
    loss, grads, tower = estimator_loss_and_grads(est, s, a, r)
    assert tower is None
    assert loss == pytest.approx(-np.log(p), rel=1e-12)
    np.testing.assert_allclose(grads.weights[0][0], (p - 1.0) * x, rtol=1e-12)
    np.testing.assert_allclose(grads.biases[0], [p - 1.0], rtol=1e-12)


def test_bce_matches_definition():
    p, r = np.array([0.2, 0.9, 0.0]), np.array([0.0, 1.0, 1.0])
    expected = -np.mean([np.log(0.8), np.log(0.9), np.log(CLAMP)])
    assert bce(p, r) == pytest.approx(expected, rel=1e-12)


def test_bernoulli_labels_converge_to_mean():
    est = tiny_estimator(state_dim=2, items=((1.0, 0.0),), hidden=(8,), seed=3, lr=1e-3)
    rng = np.random.default_rng(4)
    s = np.tile([0.4, -0.3], (64, 1))
    items = np.zeros(64, dtype=np.intp)
    for _ in range(5000):
        estimator_update(est, make_batch(s, items, (rng.random(64) < 0.7).astype(float)))
    assert est.updates == 5000
    assert est.predict(s[:1], items[:1])[0] == pytest.approx(0.7, abs=0.02)


def test_update_increments_counter_and_returns_loss():
    est = tiny_estimator(hidden=(4,))
    b = make_batch([[0.1], [0.2]], [0, 1], [1.0, 0.0])
    loss = estimator_update(est, b)
    assert est.updates == 1 and loss > 0


def test_update_rejects_empty_and_non_finite():
    est = tiny_estimator(hidden=(4,))
    with pytest.raises(ValueError):
        estimator_update(est, make_batch(np.zeros((0, 1)), [], []))
    with pytest.raises(NonFiniteError):
        estimator_update(est, make_batch([[np.nan]], [0], [1.0]))


def test_provenance_error_on_stabilized_batch():
    est = tiny_estimator(hidden=(4,))
    b = stabilize_batch(make_batch([[0.1], [0.2]], [0, 1], [1.0, 0.0]), est)
    with pytest.raises(ProvenanceError):
        estimator_update(est, b)
    assert est.updates == 0


def test_weight_decay_shrinks_parameters_without_signal():
    est = tiny_estimator(hidden=(4,), weight_decay=0.5, lr=0.01)
    est.optimizer.kind = "sgd"
    # a perfectly calibrated constant target leaves only the decay term
    est.net.flat[:] = 0.0
    est.net.weights[0][...] = 1.0
    before = np.abs(est.net.flat).sum()
    estimator_update(est, make_batch([[0.0], [0.0]], [0, 0], [0.5, 0.5]))
    assert np.abs(est.net.flat).sum() < before


@pytest.mark.parametrize("cross", [False, True])
def test_estimator_head_gradient_check(cross):
    env = Env()
    est = RewardEstimator(env.feature_dim, env.catalog, np.random.default_rng(5),
                          EstimatorConfig(hidden=(8, 6), cross=cross))
    b = env_batch(env, 12, 2)
    a = env.catalog[b.items]
    jitter_biases([est.net], 1)
    assert min_relu_margin(est.net, head_input(b.states, a, est.n_cross)) > 1e-3

    def f():
        loss, grads, _ = estimator_loss_and_grads(est, b.states, a, b.rewards)
        return loss, [grads.flat]

    assert grad_check_flat([est.net.flat], f) < 1e-4


# --------------------------------------------------------------------------- stabilize_batch


def test_constant_estimator_stabilization():
    b = make_batch([[0.1], [0.2], [0.3]], [0, 1, 0], [1.0, 0.0, 1.0])
    snapshot = {k: v.copy() for k, v in vars(b).items()}
    out = stabilize_batch(b, ConstantEstimator(0.5))
    assert isinstance(out, StabilizedBatch) and out.stabilized
    np.testing.assert_array_equal(out.rewards, 0.5)
    for name in ("states", "actions", "items", "next_states", "dones"):
        np.testing.assert_array_equal(getattr(out, name), getattr(b, name))
    for k, v in snapshot.items():
        np.testing.assert_array_equal(getattr(b, k), v)


def test_empty_batch_stabilizes_to_empty():
    out = stabilize_batch(make_batch(np.zeros((0, 1)), [], []), tiny_estimator())
    assert isinstance(out, StabilizedBatch) and len(out) == 0


def test_oracle_stabilization_equals_deterministic_reward():
    env = Env()
    rng = np.random.default_rng(0)
    states, items, expected = [], [], []
    state = env.reset(3)
    while not state.done:
        a = int(rng.integers(env.n_items))
        states.append(env.features(state))
        items.append(a)
        probe = dataclasses.replace(state, u=state.u.copy(), rng=np.random.default_rng(9))
        det = env.step(probe, a, "deterministic")
        expected.append(det.reward)
        state = env.step(state, a, "stochastic").next_state
    b = make_batch(states, items, np.zeros(len(items)))
    out = stabilize_batch(b, OracleEstimator(env))
    assert out.rewards.tolist() == expected


def test_stabilization_idempotent_and_zero_variance():
    env = Env()
    est = RewardEstimator(env.feature_dim, env.catalog, np.random.default_rng(0))
    b = env_batch(env, 64, 4)
    once = stabilize_batch(b, est)
    twice = stabilize_batch(once, est)
    np.testing.assert_array_equal(once.rewards, twice.rewards)
    # same (s, a) with different observed rewards collapse to one value
    flipped = make_batch(b.states, b.items, 1.0 - b.rewards)
    np.testing.assert_array_equal(stabilize_batch(flipped, est).rewards, once.rewards)
    assert np.all((once.rewards >= 0) & (once.rewards <= 1))


# --------------------------------------------------------------------------- shared representation


def shared_setup(seed=0, optimizer="adam"):
    env = Env()
    rng = np.random.default_rng(seed)
    emb = SharedEmbedder(env.feature_dim, env.config.dim, 6, rng, (5,), lr=0.05, optimizer=optimizer)
    est = RewardEstimator(env.feature_dim, env.catalog, rng, EstimatorConfig(hidden=(8,), embed_dim=6), emb)
    return env, emb, est


def test_routes_give_bit_identical_embeddings():
    env, emb, _ = shared_setup()
    b = env_batch(env, 10, 0)
    s1, a1, h1 = shared_forward(emb, b.states, env.catalog[b.items], "supervised")
    s2, a2, h2 = shared_forward(emb, b.states, env.catalog[b.items], "rl")
    np.testing.assert_array_equal(s1, s2)
    np.testing.assert_array_equal(a1, a2)
    assert not h1.severed and h2.severed
    with pytest.raises(ValueError):
        shared_forward(emb, b.states, env.catalog[b.items], "both")


def test_severed_route_leaves_towers_untouched():
    env, emb, _ = shared_setup()
    b = env_batch(env, 10, 1)
    before = [n.flat.copy() for n in emb.networks()]
    s, a, h = shared_forward(emb, b.states, env.catalog[b.items], "rl")
    assert h.backward(np.ones_like(s), np.ones_like(a)) is None
    for n, old in zip(emb.networks(), before):
        np.testing.assert_array_equal(n.flat, old)


def test_rl_update_through_encoder_leaves_towers_untouched():
    env, emb, _ = shared_setup()
    agent = DQNAgent(AgentConfig(hidden=(8,)), emb.embed_dim, env.n_items, np.random.default_rng(0),
                     encoder=emb.embed_states)
    before = [n.flat.copy() for n in emb.networks()]
    q_before = agent.online.flat.copy()
    agent.update(env_batch(env, 32, 2))
    assert not np.array_equal(agent.online.flat, q_before)
    for n, old in zip(emb.networks(), before):
        np.testing.assert_array_equal(n.flat, old)


@pytest.mark.parametrize("cross", [False, True])
def test_supervised_tower_gradients_match_finite_differences(cross):
    env = Env()
    rng = np.random.default_rng(7)
    emb = SharedEmbedder(env.feature_dim, env.config.dim, 5, rng, (4,))
    est = RewardEstimator(env.feature_dim, env.catalog, rng, EstimatorConfig(hidden=(6,), embed_dim=5, cross=cross),
                          emb)
    b = env_batch(env, 10, 3)
    a = env.catalog[b.items]
    jitter_biases([est.net, emb.user], 2)
    assert min_relu_margin(emb.user, b.states) > 1e-3

    def f():
        loss, head, (handle, d_s, d_a) = estimator_loss_and_grads(est, b.states, a, b.rewards)
        g_user, g_item = handle.tower_grads(d_s, d_a)
        return loss, [head.flat, g_user.flat, g_item.flat]

    assert grad_check_flat([est.net.flat, emb.user.flat, emb.item.flat], f) < 1e-4


def test_supervised_step_moves_towers_by_sgd_on_finite_difference_gradient():
    env, emb, est = shared_setup(seed=11, optimizer="sgd")
    b = env_batch(env, 16, 5)
    a = env.catalog[b.items]
    head_before = est.net.flat.copy()
    numeric = []
    for p in (emb.user.flat, emb.item.flat):
        g = np.empty_like(p)
        for i in range(p.size):
            old = p[i]
            p[i] = old + 1e-6
            up = estimator_loss_and_grads(est, b.states, a, b.rewards)[0]
            p[i] = old - 1e-6
            down = estimator_loss_and_grads(est, b.states, a, b.rewards)[0]
            p[i] = old
            g[i] = (up - down) / 2e-6
        numeric.append(g)
    before = [emb.user.flat.copy(), emb.item.flat.copy()]
    estimator_update(est, b)
    assert not np.array_equal(est.net.flat, head_before)
    for p, old, g in zip((emb.user.flat, emb.item.flat), before, numeric):
        np.testing.assert_allclose(p - old, -0.05 * g, rtol=1e-4, atol=1e-9)
