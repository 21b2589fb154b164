"""Noise-robust vision-guided prompt learning on frozen stand-in encoders."""

__version__ = "0.1.0"
