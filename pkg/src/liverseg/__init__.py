"""Liver segmentation benchmark: preprocessing, encoder-decoder CNNs, metrics and statistics."""

__version__ = "0.1.0"
