"""Epipolar multiview heatmap fusion with adaptive per-view weights."""

__version__ = "0.1.0"
