"""Learnable multi-scale Retinex correction and dual-view U-Net segmentation."""

__version__ = "0.1.0"
