"""Dominant-pattern discovery and evaluation."""
__version__ = "0.1.0"
