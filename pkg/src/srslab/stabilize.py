"""Reward stabilization: learn E[r | s, a] and feed it to RL in place of r.

Two wirings are supported:

* ``separate``: the estimator is a standalone MLP on raw (state, item)
  features; RL networks see raw state features.
* ``shared_supervised``: a user tower and an item tower produce embeddings
  that both the estimator head and the RL networks consume. Only the
  estimator's gradients reach the towers; the RL side reads them through a
  severed route.

Whether the RL update sees observed or estimated rewards is a separate
switch (:class:`RewardSource`), which gives four arms: vanilla, SRS,
auxiliary-embedding baseline, and SRS2.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np

from .agents.common import Batch, check_finite
from .numkit import (
    ConfigurationError,
    NetworkParams,
    OptimizerState,
    ParamGrads,
    dense_backward,
    dense_forward,
    mlp,
    optimizer_step,
    predict,
)

CLAMP = 1e-7


class RewardSource(str, enum.Enum):
    OBSERVED = "observed"
    ESTIMATED = "estimated"


class EmbeddingMode(str, enum.Enum):
    SEPARATE = "separate"
    SHARED_SUPERVISED = "shared_supervised"


class ProvenanceError(TypeError):
    """Stabilized rewards offered as supervised targets."""


class StabilizedBatch(Batch):
    """A batch whose rewards were produced by a reward estimator."""

    stabilized = True


@dataclass(frozen=True)
class EstimatorConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 2e-4
    batch_size: int = 64
    warmup: int = 500
    embed_dim: int = 16
    user_hidden: tuple[int, ...] = (32,)
    cross: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "user_hidden", tuple(int(h) for h in self.user_hidden))

    def validate(self) -> EstimatorConfig:
        checks = {
            "hidden": all(h >= 1 for h in self.hidden),
            "lr": self.lr > 0,
            "batch_size": self.batch_size >= 1,
            "warmup": self.warmup >= 0,
            "embed_dim": self.embed_dim >= 1,
            "user_hidden": all(h >= 1 for h in self.user_hidden),
            "weight_decay": self.weight_decay >= 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigurationError(f"invalid estimator field {name!r}: {getattr(self, name)!r}")
        return self

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# shared representation


class SharedEmbedder:
    """User tower (state features -> s) and item tower (item features -> a)."""

    def __init__(self, state_dim: int, item_dim: int, embed_dim: int, rng: np.random.Generator,
                 user_hidden=(32,), lr: float = 1e-3, optimizer: str = "adam"):
        self.embed_dim = embed_dim
        self.user = mlp(state_dim, user_hidden, embed_dim, rng, output_activation="tanh")
        self.item = mlp(item_dim, (), embed_dim, rng, output_activation="tanh")
        self.user_opt = OptimizerState(optimizer, lr=lr)
        self.item_opt = OptimizerState(optimizer, lr=lr)

    def embed_states(self, x: np.ndarray) -> np.ndarray:
        return predict(self.user, x)

    def embed_items(self, x: np.ndarray) -> np.ndarray:
        return predict(self.item, x)

    def networks(self) -> list[NetworkParams]:
        return [self.user, self.item]


class GradientHandle:
    """Backward entry point returned by :func:`shared_forward`.

    A supervised handle turns embedding gradients into a tower update; an RL
    handle is severed and ignores whatever is pushed into it.
    """

    def __init__(self, embedder: SharedEmbedder, caches=None):
        self.embedder = embedder
        self._caches = caches

    @property
    def severed(self) -> bool:
        return self._caches is None

    def tower_grads(self, d_state: np.ndarray, d_item: np.ndarray) -> tuple[ParamGrads, ParamGrads] | None:
        if self.severed:
            return None
        user_cache, item_cache = self._caches
        g_user, _ = dense_backward(self.embedder.user, user_cache, d_state, input_grad=False)
        g_item, _ = dense_backward(self.embedder.item, item_cache, d_item, input_grad=False)
        return g_user, g_item

    def backward(self, d_state: np.ndarray, d_item: np.ndarray):
        grads = self.tower_grads(d_state, d_item)
        if grads is None:
            return None
        e = self.embedder
        optimizer_step(e.user, grads[0], e.user_opt)
        optimizer_step(e.item, grads[1], e.item_opt)
        return grads


def shared_forward(embedder: SharedEmbedder, user_x: np.ndarray, item_x: np.ndarray, route: str):
    """Embed users and items; ``route`` is ``"supervised"`` or ``"rl"``.

    Both routes compute identical values. Only the supervised route hands back
    a handle that can update the towers.
    """
    if route not in ("supervised", "rl"):
        raise ValueError(f"unknown route {route!r}")
    s, user_cache = dense_forward(embedder.user, user_x)
    a, item_cache = dense_forward(embedder.item, item_x)
    caches = (user_cache, item_cache) if route == "supervised" else None
    return s, a, GradientHandle(embedder, caches)


# ---------------------------------------------------------------------------
# reward estimator


class RewardEstimator:
    """Sigmoid-output regressor of the purchase probability for (state, item)."""

    trainable = True

    def __init__(self, state_dim: int, item_features: np.ndarray, rng: np.random.Generator,
                 config: EstimatorConfig | None = None, embedder: SharedEmbedder | None = None,
                 optimizer: str = "adam"):
        self.config = config or EstimatorConfig()
        self.item_features = np.asarray(item_features, dtype=float)
        self.embedder = embedder
        self.state_dim = state_dim
        item_dim = self.item_features.shape[1]
        if embedder is not None:
            s_dim = a_dim = embedder.embed_dim
        else:
            s_dim, a_dim = state_dim, item_dim
        # cross features pair the leading state coordinates with the item coordinates
        self.n_cross = min(s_dim, a_dim) if self.config.cross else 0
        self.net = mlp(s_dim + a_dim + self.n_cross, self.config.hidden, 1, rng, output_activation="sigmoid")
        self.optimizer = OptimizerState(optimizer, lr=self.config.lr)
        self.updates = 0

    def _check(self, s: np.ndarray, a: np.ndarray) -> None:
        if s.shape[-1] != self.state_dim or a.shape[-1] != self.item_features.shape[1]:
            raise ConfigurationError(
                f"estimator expects ({self.state_dim}, {self.item_features.shape[1]}) features, "
                f"got ({s.shape[-1]}, {a.shape[-1]})"
            )

    def predict(self, states: np.ndarray, items: np.ndarray) -> np.ndarray:
        return estimate(self, states, self.item_features[np.asarray(items, dtype=np.intp)])

    def networks(self) -> list[NetworkParams]:
        return [self.net] + (self.embedder.networks() if self.embedder else [])


class OracleEstimator:
    """Estimator wired to the simulator's true purchase probability. Test use only."""

    trainable = False

    def __init__(self, env):
        self.env = env

    def predict(self, states: np.ndarray, items: np.ndarray) -> np.ndarray:
        d = self.env.config.dim
        # scalar path on purpose: bit-identical to Env.step's deterministic reward
        return np.array([self.env.prob_from_user(s[:d], int(i)) for s, i in zip(states, items)], dtype=float)


def head_input(s: np.ndarray, a: np.ndarray, n_cross: int) -> np.ndarray:
    """(s, a) concatenation, plus the elementwise products s_k * a_k for k < n_cross."""
    if n_cross == 0:
        return np.hstack((s, a))
    return np.hstack((s, a, s[:, :n_cross] * a[:, :n_cross]))


def estimate(est: RewardEstimator, s_features: np.ndarray, a_features: np.ndarray):
    """r_hat for one (s, a) pair (returns a float) or for aligned row batches."""
    s = np.asarray(s_features, dtype=float)
    a = np.asarray(a_features, dtype=float)
    est._check(s, a)
    single = s.ndim == 1
    if single:
        s, a = s[None, :], a[None, :]
    if est.embedder is not None:
        s, a = est.embedder.embed_states(s), est.embedder.embed_items(a)
    out = predict(est.net, head_input(s, a, est.n_cross))[:, 0]
    return float(out[0]) if single else out


def bce(pred: np.ndarray, target: np.ndarray) -> float:
    p = np.clip(pred, CLAMP, 1.0 - CLAMP)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))


def estimator_loss_and_grads(est: RewardEstimator, s: np.ndarray, a: np.ndarray, r: np.ndarray):
    """BCE loss, head gradients, and the tower handle plus embedding gradients (shared mode)."""
    est._check(s, a)
    if est.embedder is not None:
        s, a, handle = shared_forward(est.embedder, s, a, "supervised")
    else:
        handle = None
    out, cache = dense_forward(est.net, head_input(s, a, est.n_cross))
    pred = out[:, 0]
    loss = bce(pred, r)
    inside = (pred > CLAMP) & (pred < 1.0 - CLAMP)
    # sigmoid + BCE fuse to (p - r) at the logit; the clamp zeroes it outside its range
    d_logit = ((pred - r) * inside / len(r))[:, None]
    grads, d_x = dense_backward(est.net, cache, d_logit, wrt="preact", input_grad=handle is not None)
    tower = None
    if handle is not None:
        e, k = est.embedder.embed_dim, est.n_cross
        d_s = d_x[:, :e].copy()
        d_a = d_x[:, e:2 * e].copy()
        d_c = d_x[:, 2 * e:]
        d_s[:, :k] += d_c * a[:, :k]
        d_a[:, :k] += d_c * s[:, :k]
        tower = (handle, d_s, d_a)
    return loss, grads, tower


def estimator_update(est: RewardEstimator, batch: Batch) -> float:
    """One step on mean BCE against *observed* rewards of ``batch``."""
    if isinstance(batch, StabilizedBatch):
        raise ProvenanceError("reward estimator must not be trained on stabilized rewards")
    if len(batch) == 0:
        raise ValueError("empty batch")
    a = est.item_features[batch.items]
    loss, grads, tower = estimator_loss_and_grads(est, batch.states, a, batch.rewards)
    check_finite(loss, "estimator BCE")
    if est.config.weight_decay:
        grads.flat += est.config.weight_decay * est.net.flat
    optimizer_step(est.net, grads, est.optimizer)
    if tower is not None:
        handle, d_s, d_a = tower
        handle.backward(d_s, d_a)
    est.updates += 1
    return loss


def stabilize_batch(batch: Batch, est) -> StabilizedBatch:
    """Copy of ``batch`` with every reward replaced by the estimator's r_hat."""
    rewards = est.predict(batch.states, batch.items) if len(batch) else np.zeros(0)
    return StabilizedBatch(batch.states, batch.actions, batch.items, np.asarray(rewards, dtype=float),
                           batch.next_states, batch.dones)
