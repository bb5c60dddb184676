"""Hierarchical text-to-video retrieval with role graphs and mixture-of-expert video encoders."""

__version__ = "0.1.0"
