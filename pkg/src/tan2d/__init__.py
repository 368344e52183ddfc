"""Temporal moment localisation with a 2D temporal adjacent network."""

__version__ = "0.1.0"
