"""Kernel-based panoptic segmentation core on numpy."""

__version__ = "0.1.0"
