"""Sparse 4D ocean dissolved-oxygen field reconstruction toolkit."""

__version__ = "0.1.0"
