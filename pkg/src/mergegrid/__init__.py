"""Checkpoint merging and contextual-grid toolkit for (toy) generative recommenders."""

__version__ = "0.1.0"
