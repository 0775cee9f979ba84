"""Numerical laboratory for local gluing of Morse gradient flow lines."""

__version__ = "0.1.0"
