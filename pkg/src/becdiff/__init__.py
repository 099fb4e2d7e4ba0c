"""Conditional diffusion-GAN denoising of ROI time series with directed connectivity estimation."""

__version__ = "0.1.0"
