"""Hyperspectral pixel classification, band pruning and cell masking."""

__version__ = "0.1.0"
