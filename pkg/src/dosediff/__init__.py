"""Dose- and anatomy-aware residual diffusion for low-dose CT denoising."""

__version__ = "0.1.0"
