"""Heterogeneous-token sequential recommendation with a hierarchical causal transformer."""

__version__ = "0.1.0"
