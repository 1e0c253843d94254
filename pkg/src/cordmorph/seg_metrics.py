"""Pairwise segmentation metrics: Dice, relative volume error, average surface distance."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import EmptyMask, EmptyReference, GridMismatch

BOTH_EMPTY = "both_empty"

CSV_COLUMNS = ("subject", "contrast", "model_version", "dice", "rve_percent", "asd_mm", "flags")


def _arrays(pred, ref):
    p = pred.data if hasattr(pred, "data") else np.asarray(pred)
    r = ref.data if hasattr(ref, "data") else np.asarray(ref)
    if p.shape != r.shape:
        raise GridMismatch(f"extents differ: {p.shape} vs {r.shape}")
    dp, dr = _dims(pred), _dims(ref)
    if not np.allclose(dp, dr, rtol=1e-6, atol=0.0):
        raise GridMismatch(f"voxel dims differ: {dp} vs {dr}")
    return p != 0, r != 0


def _dims(mask):
    return tuple(getattr(mask, "voxel_dims", (1.0, 1.0, 1.0)))


def dice(pred, ref, flags=None) -> float:
    """2|P∩R| / (|P|+|R|); two empty masks score 1.0 and add ``both_empty`` to ``flags``."""
    p, r = _arrays(pred, ref)
    total = int(p.sum()) + int(r.sum())
    if total == 0:
        if flags is not None:
            flags.append(BOTH_EMPTY)
        return 1.0
    return 2.0 * int(np.logical_and(p, r).sum()) / total


def rve(pred, ref) -> float:
    """Signed relative volume error in percent; negative means under-segmentation."""
    p, r = _arrays(pred, ref)
    n_ref = int(r.sum())
    if n_ref == 0:
        raise EmptyReference("reference mask is empty")
    return 100.0 * (int(p.sum()) - n_ref) / n_ref


def surface_voxels(mask) -> np.ndarray:
    """Indices (N, 3) of foreground voxels with a background or out-of-grid 6-neighbour."""
    m = (mask.data if hasattr(mask, "data") else np.asarray(mask)) != 0
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(m & ~interior)


def _surface_points(mask):
    return surface_voxels(mask) * np.asarray(_dims(mask), dtype=np.float64)


def directed_surface_distance(pred, ref) -> float:
    """Mean distance (mm) from each surface voxel of ``pred`` to the nearest of ``ref``."""
    _arrays(pred, ref)
    sp, sr = _surface_points(pred), _surface_points(ref)
    if len(sp) == 0 or len(sr) == 0:
        raise EmptyMask("average surface distance needs two non-empty masks")
    return float(np.mean(kernels.nearest_distances(sp, sr)))


def asd(pred, ref) -> float:
    """Symmetric average surface distance: mean of both directed distances."""
    return 0.5 * (directed_surface_distance(pred, ref) + directed_surface_distance(ref, pred))


@dataclass
class MetricTriple:
    dice: float
    rve_percent: float | None
    asd_mm: float | None
    flags: list = field(default_factory=list)


def evaluate(pred, ref) -> MetricTriple:
    flags = []
    d = dice(pred, ref, flags)
    try:
        v = rve(pred, ref)
    except EmptyReference:
        v = None
        flags.append("empty_reference")
    try:
        s = asd(pred, ref)
    except EmptyMask:
        s = None
        flags.append("empty_mask")
    return MetricTriple(d, v, s, flags)


def metrics_to_csv(rows) -> str:
    """``rows``: iterables of (subject, contrast, model_version, MetricTriple)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for subject, contrast, version, m in rows:
        writer.writerow([
            subject,
            contrast,
            version,
            repr(m.dice),
            "" if m.rve_percent is None else repr(m.rve_percent),
            "" if m.asd_mm is None else repr(m.asd_mm),
            ";".join(m.flags),
        ])
    return buf.getvalue()
