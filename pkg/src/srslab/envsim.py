"""Synthetic recommendation MDP with a ground-truth purchase model.

Users are unit vectors in item-embedding space. Recommending item ``i`` to a
user ``u`` triggers a purchase with probability
``sigmoid(affinity * <u, e_i> + bias)``. Purchases pull the user's taste
toward the purchased item; non-purchases risk the user leaving. The purchase
event is drawn in both reward modes, so only the reward *signal* changes
between them, never the trajectory.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .numkit import ConfigurationError


class UsageError(RuntimeError):
    """Operation called in a state where it is not allowed."""


class RewardMode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class EnvConfig:
    dim: int = 8
    n_items: int = 50
    affinity: float = 4.0
    bias: float = -1.5
    drift: float = 0.3
    horizon: int = 20
    leave_base: float = 0.05
    gamma: float = 0.9
    noise_scale: float = 0.01
    catalog_seed: int = 0

    def validate(self) -> EnvConfig:
        checks = {
            "dim": self.dim >= 1,
            "n_items": self.n_items >= 1,
            "drift": 0.0 <= self.drift < 1.0,
            "horizon": self.horizon >= 1,
            "leave_base": 0.0 <= self.leave_base < 1.0,
            "gamma": 0.0 <= self.gamma < 1.0,
            "noise_scale": self.noise_scale >= 0.0,
            "affinity": math.isfinite(self.affinity),
            "bias": math.isfinite(self.bias),
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigurationError(f"invalid env field {name!r}: {getattr(self, name)!r}")
        return self

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EnvState:
    u: np.ndarray
    t: int = 0
    last_purchase: int = 0
    done: bool = False
    rng: np.random.Generator | None = field(default=None, repr=False, compare=False)


@dataclass
class StepOutcome:
    reward: float
    next_state: EnvState
    done: bool
    true_prob: float
    purchased: bool
    item: int


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _sigmoid(x: float) -> float:
    # branch keeps exp() from overflowing on extreme logits
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


class Env:
    """Environment bound to an immutable item catalog (``catalog[i]`` is ``e_i``)."""

    def __init__(self, config: EnvConfig | None = None):
        self.config = (config or EnvConfig()).validate()
        c = self.config
        rng = np.random.default_rng(c.catalog_seed)
        raw = rng.standard_normal((c.n_items, c.dim))
        catalog = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        catalog.setflags(write=False)
        self.catalog = catalog

    @property
    def n_items(self) -> int:
        return self.config.n_items

    @property
    def feature_dim(self) -> int:
        return self.config.dim + 2

    def features(self, state: EnvState) -> np.ndarray:
        """Observable state vector: (u, t/T, last purchase flag)."""
        return np.concatenate((state.u, (state.t / self.config.horizon, float(state.last_purchase))))

    def reset(self, episode_seed) -> EnvState:
        rng = np.random.default_rng(episode_seed)
        u = _unit(rng.standard_normal(self.config.dim))
        return EnvState(u=u, rng=rng)

    def prob_from_user(self, u: np.ndarray, action: int) -> float:
        if not 0 <= action < self.config.n_items:
            raise IndexError(f"item {action} outside catalog of {self.config.n_items}")
        c = self.config
        return _sigmoid(c.affinity * float(self.catalog[action] @ u) + c.bias)

    def true_prob(self, state: EnvState, action: int) -> float:
        return self.prob_from_user(state.u, action)

    def step(self, state: EnvState, action: int, mode: RewardMode | str) -> StepOutcome:
        if state.done:
            raise UsageError("cannot step a terminal state")
        mode = RewardMode(mode)
        c = self.config
        p = self.true_prob(state, action)
        rng = state.rng
        purchased = bool(rng.random() < p)
        noise = rng.standard_normal(c.dim)
        leave = rng.random()
        mixed = (1.0 - c.drift) * state.u + c.noise_scale * noise
        if purchased:
            mixed = mixed + c.drift * self.catalog[action]
        norm = np.linalg.norm(mixed)
        u = mixed / norm if norm > 0 else state.u.copy()
        t = state.t + 1
        done = t >= c.horizon or (not purchased and leave < c.leave_base)
        reward = p if mode is RewardMode.DETERMINISTIC else float(purchased)
        nxt = EnvState(u=u, t=t, last_purchase=int(purchased), done=done, rng=rng)
        return StepOutcome(reward, nxt, done, p, purchased, int(action))

    def select_item(self, w: np.ndarray) -> int:
        """Catalog item with the largest inner product with ``w`` (first on ties)."""
        w = np.asarray(w, dtype=float)
        if not np.isfinite(w).all():
            raise ValueError("action vector must be finite")
        return int(np.argmax(self.catalog @ w))

    def continuous_step(self, state: EnvState, w: np.ndarray, mode: RewardMode | str) -> StepOutcome:
        return self.step(state, self.select_item(w), mode)

    def rollout_batch(self, policy: Callable[[np.ndarray, np.ndarray], np.ndarray], n_episodes: int, seed,
                      mode: RewardMode | str = RewardMode.STOCHASTIC) -> np.ndarray:
        """Run ``n_episodes`` in lockstep and return each episode's summed reward.

        ``policy(features, users)`` gets the observable features of the live
        episodes (and their raw user vectors, for oracle policies) and returns
        item indices. Uses its own generator; dynamics match :meth:`step`.
        """
        if n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")
        mode = RewardMode(mode)
        c = self.config
        rng = np.random.default_rng(seed)
        u = rng.standard_normal((n_episodes, c.dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        t = np.zeros(n_episodes)
        last = np.zeros(n_episodes)
        totals = np.zeros(n_episodes)
        live = np.arange(n_episodes)
        while live.size:
            uu = u[live]
            feats = np.column_stack((uu, t[live] / c.horizon, last[live]))
            items = np.asarray(policy(feats, uu), dtype=np.intp)
            e = self.catalog[items]
            p = 1.0 / (1.0 + np.exp(-(c.affinity * np.einsum("ij,ij->i", e, uu) + c.bias)))
            bought = rng.random(live.size) < p
            noise = rng.standard_normal((live.size, c.dim))
            leave = rng.random(live.size)
            mixed = (1.0 - c.drift) * uu + c.noise_scale * noise + c.drift * bought[:, None] * e
            norms = np.linalg.norm(mixed, axis=1, keepdims=True)
            u[live] = np.where(norms > 0, mixed / np.where(norms > 0, norms, 1.0), uu)
            totals[live] += p if mode is RewardMode.DETERMINISTIC else bought
            t[live] += 1
            last[live] = bought
            done = (t[live] >= c.horizon) | (~bought & (leave < c.leave_base))
            live = live[~done]
        return totals

    def greedy_oracle_policy(self, feats: np.ndarray, users: np.ndarray) -> np.ndarray:
        c = self.config
        return np.argmax(c.affinity * (users @ self.catalog.T), axis=1)

    def random_policy(self, seed) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
        rng = np.random.default_rng(seed)
        return lambda feats, users: rng.integers(0, self.config.n_items, size=len(feats))


def oracle_greedy_return(env: Env, n_episodes: int, seed) -> float:
    """Average stochastic-mode return of the policy that maximizes true purchase probability."""
    return float(env.rollout_batch(env.greedy_oracle_policy, n_episodes, seed).mean())


def random_policy_return(env: Env, n_episodes: int, seed) -> float:
    ss = np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return float(env.rollout_batch(env.random_policy(a), n_episodes, b).mean())


# ---------------------------------------------------------------------------
# finite MDPs


@dataclass
class TabularMdp:
    """``P[s, a, s']`` transition table, ``R[s, a]`` mean rewards.

    Entering a terminal state ends the episode, so terminal states contribute
    no continuation value.
    """

    P: np.ndarray
    R: np.ndarray
    gamma: float
    terminal: frozenset[int] = frozenset()

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        n_s, n_a = self.R.shape
        if self.P.shape != (n_s, n_a, n_s):
            raise ConfigurationError(f"P has shape {self.P.shape}, expected {(n_s, n_a, n_s)}")
        if not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12, rtol=0):
            raise ConfigurationError("transition rows must sum to 1")
        if (self.R < 0).any() or (self.R > 1).any():
            raise ConfigurationError("mean rewards must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        self.terminal = frozenset(int(s) for s in self.terminal)

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]

    def continuation_mask(self) -> np.ndarray:
        mask = np.ones(self.n_states)
        mask[list(self.terminal)] = 0.0
        return mask

    def sample_next(self, s: int, a: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_states, p=self.P[s, a]))


def random_tabular_mdp(n_states: int, n_actions: int, gamma: float, seed) -> TabularMdp:
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(P, R, gamma)


def bellman_backup(mdp: TabularMdp, Q: np.ndarray) -> np.ndarray:
    v = Q.max(axis=1) * mdp.continuation_mask()
    return mdp.R + mdp.gamma * (mdp.P @ v)


def value_iteration(mdp: TabularMdp, tol: float = 1e-8, max_iter: int = 1_000_000) -> np.ndarray:
    """Optimal action values, iterated until the sup-norm Bellman residual is <= tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    Q = np.zeros_like(mdp.R)
    for _ in range(max_iter):
        nxt = bellman_backup(mdp, Q)
        done = np.max(np.abs(nxt - Q)) <= tol
        Q = nxt
        if done and np.max(np.abs(bellman_backup(mdp, Q) - Q)) <= tol:
            return Q
    raise RuntimeError("value iteration did not converge")
