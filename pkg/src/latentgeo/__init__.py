"""Riemannian geometry of IWAE latent spaces: metrics, geodesics and fields."""

__version__ = "0.1.0"
