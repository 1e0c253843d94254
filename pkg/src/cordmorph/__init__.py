"""Spinal cord morphometrics, segmentation metrics and morphometric drift monitoring."""

from .kernels import BACKEND
from .nifti_io import Volume, parse_nifti, write_nifti, orientation_from_affine, reorient, resample_mask
from .geometry import BinaryMask, SliceMorphometrics, binarize, slice_area, shape_metrics
from .seg_metrics import dice, rve, asd, surface_voxels

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Volume",
    "parse_nifti",
    "write_nifti",
    "orientation_from_affine",
    "reorient",
    "resample_mask",
    "BinaryMask",
    "SliceMorphometrics",
    "binarize",
    "slice_area",
    "shape_metrics",
    "dice",
    "rve",
    "asd",
    "surface_voxels",
]
