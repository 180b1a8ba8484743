"""Bayesian active learning with entropy, BALD and goal-driven query scores."""

__version__ = "0.1.0"
