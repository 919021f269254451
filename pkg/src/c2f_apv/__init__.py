"""Coarse-to-fine multi-organ segmentation with an adversarial performance validator."""

__version__ = "0.1.0"
