"""Coordinate-quantized variational autoencoders for shape uncertainty."""

__version__ = "0.1.0"
