"""Attention-as-memory laboratory: a toy transformer with Q/K/V swapping and key perturbation."""

__version__ = "0.1.0"
