"""Warm-started long-memory message passing for linear inverse problems."""

__version__ = "0.1.0"
