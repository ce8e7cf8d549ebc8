"""Codec-augmented time-domain heart sound classification with an M5 CNN."""

__version__ = "0.1.0"
