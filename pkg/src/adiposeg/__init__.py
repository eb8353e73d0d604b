"""Adipose tissue segmentation of volumetric MR images."""

__version__ = "0.1.0"
