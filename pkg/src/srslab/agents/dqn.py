"""Value-based agent: DQN with optional double-Q targets and a dueling head."""
from __future__ import annotations

import numpy as np

from ..numkit import NetworkParams, OptimizerState, ParamGrads, dense_backward, dense_forward, mlp, optimizer_step, predict
from .common import AgentConfig, Batch, Encoder, check_finite, encode, soft_sync


def dueling_combine(value, advantages: np.ndarray) -> np.ndarray:
    """q_a = V + A_a - mean(A). Works row-wise on batches."""
    adv = np.asarray(advantages, dtype=float)
    if adv.shape[-1] == 0:
        raise ValueError("need at least one advantage")
    value = np.asarray(value, dtype=float)
    centered = adv - adv.sum(axis=-1, keepdims=True) * (1.0 / adv.shape[-1])
    return centered + value[..., None]


def _combine_backward(d_q: np.ndarray) -> np.ndarray:
    d_v = d_q.sum(axis=1, keepdims=True)
    d_adv = d_q - d_v * (1.0 / d_q.shape[1])
    return np.hstack((d_v, d_adv))


def make_q_network(input_dim: int, n_actions: int, hidden, rng, dueling: bool) -> NetworkParams:
    # dueling head: column 0 is the state value, the rest are advantages
    return mlp(input_dim, hidden, n_actions + 1 if dueling else n_actions, rng)


def q_values(net: NetworkParams, x: np.ndarray, dueling: bool = False) -> np.ndarray:
    out = predict(net, x)
    return dueling_combine(out[..., 0], out[..., 1:]) if dueling else out


def dqn_target(batch: Batch, target_net: NetworkParams, online_net: NetworkParams, gamma: float,
               double_q: bool = False, dueling: bool = False, encoder: Encoder = None) -> np.ndarray:
    """TD targets y = r + gamma * Q_target(s', a*) with y = r on terminal transitions.

    a* maximizes the target net (vanilla) or the online net (double-Q).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    nxt = encode(encoder, batch.next_states)
    q_next = q_values(target_net, nxt, dueling)
    if double_q:
        best = np.argmax(q_values(online_net, nxt, dueling), axis=1)
        bootstrap = q_next[np.arange(len(batch)), best]
    else:
        bootstrap = q_next.max(axis=1)
    return batch.rewards + gamma * np.where(batch.dones, 0.0, bootstrap)


def dqn_loss_and_grads(batch: Batch, online_net: NetworkParams, target_net: NetworkParams, gamma: float,
                       double_q: bool = False, dueling: bool = False,
                       encoder: Encoder = None) -> tuple[float, ParamGrads]:
    y = dqn_target(batch, target_net, online_net, gamma, double_q, dueling, encoder)
    out, cache = dense_forward(online_net, encode(encoder, batch.states))
    q = dueling_combine(out[:, 0], out[:, 1:]) if dueling else out
    n = len(batch)
    rows = np.arange(n)
    err = q[rows, batch.actions] - y
    loss = float(np.mean(err ** 2))
    d_q = np.zeros_like(q)
    d_q[rows, batch.actions] = 2.0 * err / n
    d_out = _combine_backward(d_q) if dueling else d_q
    grads, _ = dense_backward(online_net, cache, d_out, input_grad=False)
    return loss, grads


def dqn_update(batch: Batch, online_net: NetworkParams, target_net: NetworkParams, gamma: float,
               optimizer: OptimizerState, double_q: bool = False, dueling: bool = False,
               encoder: Encoder = None) -> float:
    """One optimizer step on mean (y - Q(s, a))^2 with y held fixed. Returns the pre-step loss."""
    loss, grads = dqn_loss_and_grads(batch, online_net, target_net, gamma, double_q, dueling, encoder)
    check_finite(loss, "DQN loss")
    optimizer_step(online_net, grads, optimizer)
    return loss


class DQNAgent:
    def __init__(self, config: AgentConfig, input_dim: int, n_actions: int, rng: np.random.Generator,
                 encoder: Encoder = None):
        self.config = config
        self.n_actions = n_actions
        self.encoder = encoder
        self.online = make_q_network(input_dim, n_actions, config.hidden, rng, config.dueling)
        self.target = self.online.copy()
        self.optimizer = OptimizerState("adam", lr=config.lr)
        self.updates = 0

    def q(self, x: np.ndarray) -> np.ndarray:
        return q_values(self.online, encode(self.encoder, x), self.config.dueling)

    def act(self, x: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
        # skip the forward pass when the action is going to be random anyway
        if rng.random() < epsilon:
            return int(rng.integers(self.n_actions))
        return int(np.argmax(self.q(x[None, :])[0]))

    def update(self, batch: Batch) -> float:
        c = self.config
        loss = dqn_update(batch, self.online, self.target, c.gamma, self.optimizer, c.double_q, c.dueling,
                          self.encoder)
        self.updates += 1
        if c.target_every == 0:
            soft_sync(self.target, self.online, c.tau)
        elif self.updates % c.target_every == 0:
            soft_sync(self.target, self.online, 1.0)
        return loss

    def policy(self):
        """Greedy snapshot: ``policy(features, users) -> items``."""
        net, dueling, encoder = self.online.copy(), self.config.dueling, self.encoder
        return lambda feats, users: np.argmax(q_values(net, encode(encoder, feats), dueling), axis=1)

    def networks(self) -> list[NetworkParams]:
        return [self.online, self.target]


def fit_tabular(mdp, config: AgentConfig, n_updates: int, rng: np.random.Generator) -> np.ndarray:
    """Train a DQN agent on a finite MDP and return its Q table.

    States are one-hot encoded, (s, a) pairs are drawn uniformly, next states
    are sampled from ``mdp.P`` and rewards are the deterministic means
    ``mdp.R``. Entering a terminal state ends the transition.
    """
    n_s, n_a = mdp.n_states, mdp.n_actions
    eye = np.eye(n_s)
    agent = DQNAgent(config, n_s, n_a, rng)
    terminal = np.zeros(n_s, dtype=bool)
    terminal[list(mdp.terminal)] = True
    cum = np.cumsum(mdp.P, axis=2)
    for _ in range(n_updates):
        s = rng.integers(n_s, size=config.batch_size)
        a = rng.integers(n_a, size=config.batch_size)
        u = rng.random(config.batch_size)
        s2 = np.minimum((cum[s, a] < u[:, None]).sum(axis=1), n_s - 1)
        batch = Batch(eye[s], a, a, mdp.R[s, a], eye[s2], terminal[s2])
        agent.update(batch)
    return agent.q(eye)
