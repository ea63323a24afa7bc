"""Weakly supervised audio-visual video parsing toolkit."""

__version__ = "0.1.0"
