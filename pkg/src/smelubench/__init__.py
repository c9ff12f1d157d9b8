"""Smooth activations and a reproducibility benchmark for sparse online models."""

__version__ = "0.1.0"
