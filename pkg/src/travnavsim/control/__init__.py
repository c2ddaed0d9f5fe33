"""Sampling-based model predictive control on traversability maps."""
