"""Quantization-aware training of graph neural networks with learned per-node bitwidths."""

__version__ = "0.1.0"
