"""Desk-scale inverse rendering with triangle-bound Gaussian splats."""

__version__ = "0.1.0"
