"""Prompt-attention and uncertainty-refined multi-contrast segmentation on synthetic phantoms."""

__version__ = "0.1.0"
