"""Gated memory-network Q-learning for market-replay trading."""

__version__ = "0.1.0"
