"""Configurable pipeline for medical image segmentation.

NIfTI-1 I/O, preprocessing, patch-wise analysis, data augmentation,
segmentation metrics, batch generation, a reference model and automatic
evaluation (cross-validation).  Volumes use (z, y, x) axis order.
"""

__version__ = "0.1.0"
