"""Text-conditioned 2D human pose skeleton generation via heatmap diffusion."""

__version__ = "0.1.0"
