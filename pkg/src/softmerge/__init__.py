"""Soft merging of architecture-identical networks with hard concrete gates."""

__version__ = "0.1.0"
