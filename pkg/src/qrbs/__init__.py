"""Quasi-rigid blend skinning for articulated objects."""

__version__ = "0.1.0"
