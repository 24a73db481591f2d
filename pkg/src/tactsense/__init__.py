"""Image processing for a retrographic tactile sensor.

Depth from colour (lookup-table photometric stereo + Poisson integration),
marker-grid distortion correction and tracking, incipient-slip detection,
hexahedral-FEM contact forces, and an illumination-design optimiser, plus a
synthetic renderer that supplies ground truth for all of them.
"""
from .core import DepthMap, GradientField, SensorGeometry, ShapeMismatch, TactileImage, difference_image, validate

__version__ = "0.1.0"

__all__ = [
    "DepthMap",
    "GradientField",
    "SensorGeometry",
    "ShapeMismatch",
    "TactileImage",
    "difference_image",
    "validate",
]
