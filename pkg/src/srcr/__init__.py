"""Compression metrics and layer-level pruning/quantization toolkit."""

__version__ = "0.1.0"
