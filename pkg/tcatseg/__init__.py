"""Superpoint-guided segmentation of dental arch point clouds on a small numpy autodiff core."""

__version__ = "0.1.0"
