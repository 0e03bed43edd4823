"""Substation bus splitting for cross-zone export: exact optimisation and a graph-network surrogate."""

__version__ = "0.1.0"
