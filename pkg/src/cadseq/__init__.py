"""Sketch-extrusion CAD sequences, a geometry-conditioned state-space diffusion model, and evaluation metrics."""

__version__ = "0.1.0"
