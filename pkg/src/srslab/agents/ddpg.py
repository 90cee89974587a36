"""Deterministic actor-critic over a continuous ranking vector.

The actor emits a vector ``w`` in item-embedding space; the environment shows
the catalog item with the largest ``<w, e_i>``. Stored transitions carry the
embedding of the item actually shown, so the critic learns Q(s, e) on the
catalog sphere and its action-gradient points the actor toward better items.
"""
from __future__ import annotations

import numpy as np

from ..numkit import (
    NetworkParams,
    OptimizerState,
    ParamGrads,
    dense_backward,
    dense_forward,
    mlp,
    optimizer_step,
    predict,
)
from .common import AgentConfig, Batch, Encoder, check_finite, encode, soft_sync


def actor_forward(actor: NetworkParams, x: np.ndarray, unit: bool = True):
    raw, cache = dense_forward(actor, x)
    if not unit:
        return raw, (cache, None, None)
    norm = np.linalg.norm(raw, axis=1, keepdims=True) + 1e-12
    mu = raw / norm
    return mu, (cache, mu, norm)


def actor_backward(actor: NetworkParams, state, d_mu: np.ndarray) -> ParamGrads:
    cache, mu, norm = state
    if mu is not None:
        d_mu = (d_mu - mu * (d_mu * mu).sum(axis=1, keepdims=True)) / norm
    grads, _ = dense_backward(actor, cache, d_mu, input_grad=False)
    return grads


def actor_output(actor: NetworkParams, x: np.ndarray, unit: bool = True) -> np.ndarray:
    raw = predict(actor, x)
    return raw / (np.linalg.norm(raw, axis=-1, keepdims=True) + 1e-12) if unit else raw


def ddpg_target(batch: Batch, target_actor: NetworkParams, target_critic: NetworkParams, gamma: float,
                unit: bool = True, encoder: Encoder = None) -> np.ndarray:
    s2 = encode(encoder, batch.next_states)
    mu2 = actor_output(target_actor, s2, unit)
    q2 = predict(target_critic, np.hstack((s2, mu2)))[:, 0]
    return batch.rewards + gamma * np.where(batch.dones, 0.0, q2)


def critic_loss_and_grads(batch: Batch, critic: NetworkParams, y: np.ndarray,
                          encoder: Encoder = None) -> tuple[float, ParamGrads]:
    s = encode(encoder, batch.states)
    q, cache = dense_forward(critic, np.hstack((s, batch.actions)))
    err = q[:, 0] - y
    loss = float(np.mean(err ** 2))
    grads, _ = dense_backward(critic, cache, (2.0 * err / len(err))[:, None], input_grad=False)
    return loss, grads


def actor_objective_and_grads(batch: Batch, actor: NetworkParams, critic: NetworkParams, unit: bool = True,
                              encoder: Encoder = None) -> tuple[float, ParamGrads]:
    """Mean Q(s, mu(s)) and the gradient of its *negation* w.r.t. actor parameters."""
    s = encode(encoder, batch.states)
    mu, a_state = actor_forward(actor, s, unit)
    q, c_cache = dense_forward(critic, np.hstack((s, mu)))
    n = len(q)
    _, d_in = dense_backward(critic, c_cache, np.full((n, 1), -1.0 / n))
    d_mu = d_in[:, s.shape[1]:]
    return float(q.mean()), actor_backward(actor, a_state, d_mu)


def ddpg_update(batch: Batch, actor: NetworkParams, critic: NetworkParams, target_actor: NetworkParams,
                target_critic: NetworkParams, gamma: float, actor_opt: OptimizerState,
                critic_opt: OptimizerState, unit: bool = True, encoder: Encoder = None) -> tuple[float, float]:
    """Critic regression to the target-network bootstrap, then one actor ascent step."""
    y = ddpg_target(batch, target_actor, target_critic, gamma, unit, encoder)
    critic_loss, c_grads = critic_loss_and_grads(batch, critic, y, encoder)
    check_finite(critic_loss, "DDPG critic loss")
    optimizer_step(critic, c_grads, critic_opt)
    objective, a_grads = actor_objective_and_grads(batch, actor, critic, unit, encoder)
    check_finite(objective, "DDPG actor objective")
    optimizer_step(actor, a_grads, actor_opt)
    return critic_loss, objective


class DDPGAgent:
    def __init__(self, config: AgentConfig, input_dim: int, catalog: np.ndarray, rng: np.random.Generator,
                 encoder: Encoder = None):
        self.config = config
        self.catalog = catalog
        self.encoder = encoder
        d = catalog.shape[1]
        self.actor = mlp(input_dim, config.hidden, d, rng, output_activation="tanh")
        self.critic = mlp(input_dim + d, config.hidden, 1, rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_opt = OptimizerState("adam", lr=config.actor_lr)
        self.critic_opt = OptimizerState("adam", lr=config.critic_lr)
        self.updates = 0

    @property
    def action_dim(self) -> int:
        return self.catalog.shape[1]

    def proto_action(self, x: np.ndarray) -> np.ndarray:
        return actor_output(self.actor, encode(self.encoder, x[None, :]), self.config.unit_action)[0]

    def act(self, x: np.ndarray, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        """Noisy ranking vector and the item it selects."""
        w = self.proto_action(x) + noise * rng.standard_normal(self.action_dim)
        return w, int(np.argmax(self.catalog @ w))

    def update(self, batch: Batch) -> tuple[float, float]:
        c = self.config
        out = ddpg_update(batch, self.actor, self.critic, self.target_actor, self.target_critic, c.gamma,
                          self.actor_opt, self.critic_opt, c.unit_action, self.encoder)
        soft_sync(self.target_actor, self.actor, c.tau)
        soft_sync(self.target_critic, self.critic, c.tau)
        self.updates += 1
        return out

    def policy(self):
        actor, catalog, unit, encoder = self.actor.copy(), self.catalog, self.config.unit_action, self.encoder
        return lambda feats, users: np.argmax(actor_output(actor, encode(encoder, feats), unit) @ catalog.T, axis=1)

    def networks(self) -> list[NetworkParams]:
        return [self.actor, self.critic, self.target_actor, self.target_critic]
