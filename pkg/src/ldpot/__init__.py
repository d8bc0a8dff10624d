"""Entropic optimal transport for generative modelling from locally privatized data."""

__version__ = "0.1.0"
