"""Unbiased trace-driven simulation with learned, policy-invariant latent factors."""

__version__ = "0.1.0"
