"""Spectral statistical process monitoring of point clouds with a color channel."""

__version__ = "0.1.0"
