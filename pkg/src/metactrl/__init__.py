"""Implicit meta-learning for data-efficient reference tracking."""
from metactrl import diffnum  # noqa: F401  (enables float64 in JAX before anything else)

__version__ = "0.1.0"
