"""Hierarchical residual-quantized tokenizer and next-scale autoregressive super-resolution."""

__version__ = "0.1.0"
