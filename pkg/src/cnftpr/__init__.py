"""Continuous normalizing flows with a trajectory polynomial regularizer."""

__version__ = "0.1.0"
