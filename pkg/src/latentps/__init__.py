"""Bayesian latent principal stratification for cluster randomized trials."""

__version__ = "0.1.0"
