"""Continual learning by merging model weights after every task."""

__version__ = "0.1.0"
