"""Sparse Top-u attention with index reuse, and the MLinear forecaster."""

__version__ = "0.1.0"
