"""Consensus-bottleneck asset pricing: preprocessing, models, evaluation,
portfolios and pricing diagnostics."""

__version__ = "0.1.0"
