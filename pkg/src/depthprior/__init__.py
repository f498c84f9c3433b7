"""Depth-map completion by test-time optimization of an untrained encoder-decoder."""

__version__ = "0.1.0"
