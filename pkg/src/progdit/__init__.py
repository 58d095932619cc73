"""Interval-conditioned latent diffusion transformer for longitudinal brain-slice synthesis."""

__version__ = "0.1.0"
