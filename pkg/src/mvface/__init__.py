"""Multi-view occlusion-aware inverse rendering of a linear morphable face model."""

__version__ = "0.1.0"
