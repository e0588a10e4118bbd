"""Retrieval-augmented test-time adaptation for sequential recommenders."""

__version__ = "0.1.0"
