"""Diffusion-based transistor-level amplifier generation."""

__version__ = "0.1.0"
