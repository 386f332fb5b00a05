"""Sparse fast-transform convolution engine and layer-chaining simulator."""

__version__ = "0.1.0"
