"""Latent diffusion model for periodic crystal structures."""

__version__ = "0.1.0"
