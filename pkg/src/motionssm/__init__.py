"""Lightweight text-conditioned motion diffusion on a selective state-space denoiser."""

__version__ = "0.1.0"
