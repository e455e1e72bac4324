"""Continual semantic segmentation with Fourier style replay on synthetic scenes."""

__version__ = "0.1.0"
