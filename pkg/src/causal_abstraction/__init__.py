"""Causal abstraction over finite discrete structural causal models."""

__version__ = "0.1.0"
