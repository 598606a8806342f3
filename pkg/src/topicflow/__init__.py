"""Unsupervised topic-level dialogue structure and topic-controlled response generation."""

__version__ = "0.1.0"
