"""Temporal knowledge-graph extrapolation with mixture-of-experts adapters."""

__version__ = "0.1.0"
