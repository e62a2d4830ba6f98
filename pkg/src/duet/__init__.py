"""Dual-encoder graph transformer with self-supervised semantic neighbor fetching."""

from .graph import Graph, NeighborSet, UNREACHABLE

__all__ = ["Graph", "NeighborSet", "UNREACHABLE"]

__version__ = "0.1.0"
