"""Binomial-Weibull spatial rainfall model with latent Gaussian processes."""

__version__ = "0.1.0"
