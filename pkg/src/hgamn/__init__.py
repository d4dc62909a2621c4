"""Multilingual POI retrieval over a heterogeneous POI/query graph."""

__version__ = "0.1.0"
