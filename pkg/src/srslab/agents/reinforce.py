"""Monte-Carlo policy gradient over a softmax item policy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numkit import NetworkParams, OptimizerState, ParamGrads, dense_backward, dense_forward, mlp, optimizer_step, predict
from .common import AgentConfig, Encoder, check_finite, discounted_returns, encode

LOG_FLOOR = -30.0


@dataclass
class Episode:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: bool = True
    items: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.actions = np.asarray(self.actions, dtype=np.intp)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.items is None:
            self.items = self.actions

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class RunningMean:
    """Exponential running mean; the first observation seeds it."""

    decay: float = 0.95
    value: float = 0.0
    count: int = 0

    def update(self, x: float) -> float:
        self.value = x if self.count == 0 else self.decay * self.value + (1.0 - self.decay) * x
        self.count += 1
        return self.value


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def reinforce_loss_and_grads(episode: Episode, policy_net: NetworkParams, gamma: float, baseline: float,
                             encoder: Encoder = None) -> tuple[float, ParamGrads, int]:
    """Loss -sum_t (G_t - b) log pi(a_t|s_t); also returns how many log-probs hit the floor."""
    returns = discounted_returns(episode.rewards, gamma)
    adv = returns - baseline
    probs, cache = dense_forward(policy_net, encode(encoder, episode.states))
    rows = np.arange(len(episode))
    logp_all = _log_softmax(cache.pre[-1])
    logp = logp_all[rows, episode.actions]
    clamped = logp < LOG_FLOOR
    loss = float(-np.sum(adv * np.maximum(logp, LOG_FLOOR)))
    onehot = np.zeros_like(probs)
    onehot[rows, episode.actions] = 1.0
    d_logits = -(adv * ~clamped)[:, None] * (onehot - probs)
    grads, _ = dense_backward(policy_net, cache, d_logits, wrt="preact", input_grad=False)
    return loss, grads, int(clamped.sum())


def reinforce_update(episode: Episode, policy_net: NetworkParams, gamma: float, optimizer: OptimizerState,
                     baseline: RunningMean, encoder: Encoder = None, diagnostics: dict | None = None) -> float:
    """One policy-gradient step, then fold the episode return into the baseline."""
    if len(episode) == 0:
        return 0.0
    loss, grads, n_clamped = reinforce_loss_and_grads(episode, policy_net, gamma, baseline.value, encoder)
    check_finite(loss, "REINFORCE loss")
    if diagnostics is not None and n_clamped:
        diagnostics["log_clamped"] = diagnostics.get("log_clamped", 0) + n_clamped
    optimizer_step(policy_net, grads, optimizer)
    baseline.update(float(discounted_returns(episode.rewards, gamma)[0]))
    return loss


class ReinforceAgent:
    def __init__(self, config: AgentConfig, input_dim: int, n_actions: int, rng: np.random.Generator,
                 encoder: Encoder = None):
        self.config = config
        self.encoder = encoder
        self.policy_net = mlp(input_dim, config.hidden, n_actions, rng, output_activation="softmax")
        self.optimizer = OptimizerState("adam", lr=config.lr)
        self.baseline = RunningMean(config.baseline_decay)
        self.diagnostics: dict = {}

    def probs(self, x: np.ndarray) -> np.ndarray:
        return predict(self.policy_net, encode(self.encoder, x))

    def act(self, x: np.ndarray, rng: np.random.Generator) -> int:
        p = self.probs(x[None, :])[0]
        # inverse-CDF draw; clip guards against the cumulative sum ending a hair below 1
        return int(min(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"), len(p) - 1))

    def update(self, episode: Episode) -> float:
        return reinforce_update(episode, self.policy_net, self.config.gamma, self.optimizer, self.baseline,
                                self.encoder, self.diagnostics)

    def policy(self):
        """Evaluation policy: most probable item."""
        net, encoder = self.policy_net.copy(), self.encoder
        return lambda feats, users: np.argmax(predict(net, encode(encoder, feats)), axis=1)

    def networks(self) -> list[NetworkParams]:
        return [self.policy_net]
