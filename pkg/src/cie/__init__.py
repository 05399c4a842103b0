"""Continuous control of generation length through interpolated embeddings."""

__version__ = "0.1.0"
