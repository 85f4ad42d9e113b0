"""Point-cloud encoder pre-training by conditional next-frame diffusion."""

__version__ = "0.1.0"
