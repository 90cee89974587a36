"""Reward-stabilized model-free RL for simulated recommendation."""

__version__ = "0.1.0"
