"""Diffusion-based adversarial purification for PMU event classification."""

__version__ = "0.1.0"
