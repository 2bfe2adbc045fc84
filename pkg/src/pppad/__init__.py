"""Learnable peripheral prediction padding, padding baselines and translation-invariance metrics."""

__version__ = "0.1.0"
