"""Mask-conditioned latent diffusion for salient surface defects."""

__version__ = "0.1.0"
