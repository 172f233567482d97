"""Desk-scale laboratory for self-improving item tokenization in generative recommendation."""

__version__ = "0.1.0"
