"""Piecewise exponential additive models with a point-cloud deep component."""

__version__ = "0.1.0"
