"""Pixel-wise defect-depth estimation from long-pulse thermography."""

__version__ = "0.1.0"
