from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from ..numkit import ConfigurationError, NetworkParams, NonFiniteError

Encoder = Optional[Callable[[np.ndarray], np.ndarray]]

FAMILIES = ("dqn", "reinforce", "ddpg")


@dataclass(frozen=True)
class AgentConfig:
    family: str = "dqn"
    double_q: bool = True
    dueling: bool = True
    eps_start: float = 1.0
    eps_end: float = 0.05
    # None: decay over the first 30% of training episodes
    eps_decay_episodes: Optional[int] = None
    target_every: int = 100
    tau: float = 0.005
    batch_size: int = 64
    hidden: tuple[int, ...] = (64, 64)
    gamma: float = 0.9
    lr: float = 1e-3
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    buffer_capacity: int = 10_000
    baseline_decay: float = 0.95
    noise_start: float = 0.2
    noise_end: float = 0.02
    unit_action: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def validate(self) -> AgentConfig:
        checks = {
            "family": self.family in FAMILIES,
            "eps_start": 0.0 <= self.eps_start <= 1.0,
            "eps_end": 0.0 <= self.eps_end <= 1.0,
            "eps_decay_episodes": self.eps_decay_episodes is None or self.eps_decay_episodes >= 0,
            "target_every": self.target_every >= 0,
            "tau": 0.0 < self.tau <= 1.0,
            "batch_size": self.batch_size >= 1,
            "hidden": all(h >= 1 for h in self.hidden),
            "gamma": 0.0 <= self.gamma < 1.0,
            "lr": self.lr > 0,
            "actor_lr": self.actor_lr > 0,
            "critic_lr": self.critic_lr > 0,
            "buffer_capacity": self.buffer_capacity >= 1,
            "baseline_decay": 0.0 <= self.baseline_decay < 1.0,
            "noise_start": self.noise_start >= 0,
            "noise_end": self.noise_end >= 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigurationError(f"invalid agent field {name!r}: {getattr(self, name)!r}")
        return self

    def with_(self, **changes) -> AgentConfig:
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def linear_schedule(start: float, end: float, span: int, episode: int) -> float:
    if span <= 0 or episode >= span:
        return end
    return start + (end - start) * episode / span


@dataclass
class Transition:
    state: np.ndarray
    action: object
    reward: float
    next_state: np.ndarray
    done: bool
    item: int = -1

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"reward {self.reward} outside [0, 1]")
        if self.item < 0 and np.ndim(self.action) == 0:
            self.item = int(self.action)


@dataclass
class Batch:
    """Column-stacked transitions. ``actions`` holds item indices for discrete
    agents and action vectors for continuous ones; ``items`` always holds the
    catalog item that was actually shown."""

    states: np.ndarray
    actions: np.ndarray
    items: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i: int) -> Transition:
        a = self.actions[i]
        return Transition(self.states[i], a if np.ndim(a) else int(a), float(self.rewards[i]),
                          self.next_states[i], bool(self.dones[i]), int(self.items[i]))

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> Batch:
        return cls(
            states=np.array([t.state for t in transitions], dtype=float),
            actions=np.array([t.action for t in transitions]),
            items=np.array([t.item for t in transitions], dtype=np.intp),
            rewards=np.array([t.reward for t in transitions], dtype=float),
            next_states=np.array([t.next_state for t in transitions], dtype=float),
            dones=np.array([t.done for t in transitions], dtype=bool),
        )


class BufferNotReady(RuntimeError):
    """Sampling from an empty buffer."""


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int | None = None):
        if capacity < 1:
            raise ConfigurationError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim)) if action_dim else np.zeros(capacity, dtype=np.intp)
        self.items = np.zeros(capacity, dtype=np.intp)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0
        self.total_added = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        i = self.cursor
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.actions[i] = t.action
        self.items[i] = t.item
        self.rewards[i] = t.reward
        self.dones[i] = t.done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def ready(self, batch_size: int) -> bool:
        return self.size >= batch_size

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.items[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx])


def replay_sample(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform sample with replacement; fancy indexing hands back copies."""
    if buffer.size == 0:
        raise BufferNotReady("cannot sample from an empty buffer")
    return buffer.gather(rng.integers(0, buffer.size, size=batch_size))


def epsilon_greedy(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    q = np.asarray(q_values)
    if q.size == 0:
        raise ValueError("empty q_values")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def soft_sync(target: NetworkParams, online: NetworkParams, tau: float) -> NetworkParams:
    if target.sizes != online.sizes:
        raise ConfigurationError("target and online networks differ in shape")
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    if tau == 1.0:
        np.copyto(target.flat, online.flat)
    else:
        target.flat *= 1.0 - tau
        target.flat += tau * online.flat
    return target


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def encode(encoder: Encoder, x: np.ndarray) -> np.ndarray:
    return x if encoder is None else encoder(x)


def check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteError(f"{what} is not finite ({value})")
    return value
