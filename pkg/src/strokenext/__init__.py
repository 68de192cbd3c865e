"""Dual-branch ConvNeXt classification pipeline for CT stroke images."""

__version__ = "0.1.0"
