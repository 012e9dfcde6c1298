"""Scatter-gather request splitting over a pool of worker processes."""

__version__ = "0.1.0"
