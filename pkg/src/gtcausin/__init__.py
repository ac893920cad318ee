"""Spatiotemporal traffic forecasting with a causal-insight attention layer."""

__version__ = "0.1.0"
