"""Numerical laboratory for over-parameterized Elman RNNs."""

__version__ = "0.1.0"
