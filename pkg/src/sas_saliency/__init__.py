"""Saliency-based target detection and segmentation for multi-aspect sonar imagery."""

__version__ = "0.1.0"
