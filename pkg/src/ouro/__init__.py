"""Recursive transformer with hypernetwork-modulated frozen low-rank bases."""

__version__ = "0.1.0"
