"""Simultaneous detection and segmentation: evaluation, region pipeline and diagnostics."""

__version__ = "0.1.0"
