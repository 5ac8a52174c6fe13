"""Continual 2D segmentation with latent-space regularisation, on a tiny
self-contained autodiff engine. See README.md for the tour."""

__version__ = "0.1.0"
