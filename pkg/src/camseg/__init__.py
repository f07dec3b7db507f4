"""Segmenting classification targets with Grad-CAM heatmaps of small CNN classifiers."""

__version__ = "0.1.0"
