"""Differentiable 3D Gaussian splatting trainer with edge- and
appearance-attention losses and opacity-weighted densification."""

__version__ = "0.1.0"
