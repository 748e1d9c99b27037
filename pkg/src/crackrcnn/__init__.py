"""Mask R-CNN variants (FPN, attention PANet, HRNet) for crack instance segmentation."""

__version__ = "0.1.0"
