"""Reinforcement-learning optical proximity correction with graph feature fusion."""

__version__ = "0.1.0"
