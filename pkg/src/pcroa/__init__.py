"""Polynomial-chaos expansion and SOS region-of-attraction toolkit."""

__version__ = "0.1.0"
