from .common import (
    AgentConfig,
    Batch,
    BufferNotReady,
    ReplayBuffer,
    Transition,
    discounted_returns,
    epsilon_greedy,
    linear_schedule,
    replay_sample,
    soft_sync,
)
from .ddpg import DDPGAgent, ddpg_update
from .dqn import DQNAgent, dqn_target, dqn_update, dueling_combine
from .reinforce import Episode, ReinforceAgent, RunningMean, reinforce_update

__all__ = [
    "AgentConfig", "Batch", "BufferNotReady", "ReplayBuffer", "Transition", "discounted_returns",
    "epsilon_greedy", "linear_schedule", "replay_sample", "soft_sync", "DDPGAgent", "ddpg_update",
    "DQNAgent", "dqn_target", "dqn_update", "dueling_combine", "Episode", "ReinforceAgent", "RunningMean",
    "reinforce_update",
]
