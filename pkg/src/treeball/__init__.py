"""Hyperbolic value signals for step-wise search over enumerable reasoning trees."""

__version__ = "0.1.0"
