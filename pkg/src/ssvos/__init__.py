"""Desk-scale discriminative spatial-semantic video object segmentation."""

__version__ = "0.1.0"
