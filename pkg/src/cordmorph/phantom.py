"""Synthetic cord phantoms with analytically known morphometrics.

Rasterization is voxel-centre containment: a voxel is foreground iff its
centre lies inside the continuous shape. Masks come out in RPI orientation.
"""

from __future__ import annotations

import gzip
import hashlib
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ShapeExceedsGrid
from .geometry import BinaryMask
from .nifti_io import Volume, write_nifti

log = logging.getLogger(__name__)

KINDS = ("elliptic_cylinder", "tapered_cylinder", "box")
DEFAULT_CONTRASTS = ("T2w", "T1w", "T2starw", "MTon", "GRE-T1w", "DWI")
MANIFEST_COLUMNS = ("subject_id", "contrast", "version_id", "mask_path", "labels_path", "site", "pathology")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "elliptic_cylinder"
    ap_semi_axis: float = 4.0
    rl_semi_axis: float = 3.0
    length: float = 20.0
    voxel_dims: tuple = (0.5, 0.5, 1.0)
    taper_ratio: float | None = None
    level_plan: tuple = ()
    grid: tuple | None = None
    offset: tuple = (0, 0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if min(self.ap_semi_axis, self.rl_semi_axis, self.length) <= 0:
            raise ValueError("semi-axes and length must be positive")
        if len(self.voxel_dims) != 3 or min(self.voxel_dims) <= 0:
            raise ValueError("voxel_dims must be three positive numbers")
        if self.taper_ratio is not None and not 0 < self.taper_ratio <= 1:
            raise ValueError("taper_ratio must lie in (0, 1]")

    @property
    def n_shape_slices(self) -> int:
        return max(1, int(math.floor(self.length / self.voxel_dims[2] + 0.5)))

    def default_grid(self):
        d0, d1, _ = self.voxel_dims
        nx = 2 * (math.ceil(self.rl_semi_axis / d0) + 2 + abs(self.offset[0]))
        ny = 2 * (math.ceil(self.ap_semi_axis / d1) + 2 + abs(self.offset[1]))
        return (nx, ny, self.n_shape_slices + 2)


@dataclass
class AnalyticTruth:
    """Continuous-shape morphometrics per slice (NaN on slices outside the shape)."""

    area: np.ndarray
    ap_diameter: np.ndarray
    transverse_diameter: np.ndarray
    compression_ratio: np.ndarray
    eccentricity: np.ndarray
    solidity: np.ndarray
    interior: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _scale_along(spec, k_rel):
    """Semi-axis scale for shape slice ``k_rel`` (0 = first shape slice)."""
    if spec.kind != "tapered_cylinder" or spec.taper_ratio is None:
        return 1.0
    n = spec.n_shape_slices
    t = 0.0 if n == 1 else k_rel / (n - 1)
    return 1.0 - (1.0 - spec.taper_ratio) * t


def rpi_affine(voxel_dims, extents):
    d0, d1, d2 = voxel_dims
    aff = np.diag([d0, -d1, -d2, 1.0])
    aff[:3, 3] = (-0.5 * extents[0] * d0, 0.5 * extents[1] * d1, 0.5 * extents[2] * d2)
    return aff


def generate(spec: PhantomSpec):
    """Return ``(mask, labels, truth)`` for the phantom described by ``spec``."""
    nx, ny, nz = spec.grid if spec.grid is not None else spec.default_grid()
    d0, d1, d2 = spec.voxel_dims
    n_shape = spec.n_shape_slices
    if nz < n_shape + 2:
        raise ShapeExceedsGrid(f"{n_shape} shape slices need at least {n_shape + 2} grid slices")
    # The shape is centred on a voxel corner so rasterization is parity-independent.
    cx = nx // 2 - 0.5 + spec.offset[0]
    cy = ny // 2 - 0.5 + spec.offset[1]
    b_max, a_max = spec.rl_semi_axis, spec.ap_semi_axis
    if (math.ceil(cx - b_max / d0) < 1 or math.floor(cx + b_max / d0) > nx - 2
            or math.ceil(cy - a_max / d1) < 1 or math.floor(cy + a_max / d1) > ny - 2):
        raise ShapeExceedsGrid(f"shape does not fit grid {(nx, ny, nz)} with a 1-voxel margin")

    x = (np.arange(nx) - cx) * d0
    y = (np.arange(ny) - cy) * d1
    X, Y = np.meshgrid(x, y, indexing="ij")
    data = np.zeros((nx, ny, nz), dtype=np.uint8)
    labels = np.zeros((nx, ny, nz), dtype=np.uint8)
    shape = (nz,)
    truth = {k: np.full(shape, np.nan) for k in
             ("area", "ap_diameter", "transverse_diameter", "compression_ratio", "eccentricity", "solidity")}

    first = 1
    for k_rel in range(n_shape):
        k = first + k_rel
        s = _scale_along(spec, k_rel)
        a, b = a_max * s, b_max * s
        if spec.kind == "box":
            inside = (np.abs(X) <= b) & (np.abs(Y) <= a)
            area = 4.0 * a * b
            ecc = 0.0 if a == b else math.sqrt(1 - (min(a, b) / max(a, b)) ** 2)
        else:
            inside = (X / b) ** 2 + (Y / a) ** 2 <= 1.0
            area = math.pi * a * b
            ecc = math.sqrt(1.0 - (min(a, b) / max(a, b)) ** 2)
        data[:, :, k] = inside
        truth["area"][k] = area
        truth["ap_diameter"][k] = 2 * a
        truth["transverse_diameter"][k] = 2 * b
        truth["compression_ratio"][k] = a / b
        truth["eccentricity"][k] = ecc
        truth["solidity"][k] = 1.0

    for level, (start, stop) in spec.level_plan:
        lo, hi = max(int(start), 0), min(int(stop), nz)
        labels[:, :, lo:hi] = np.where(data[:, :, lo:hi] > 0, int(level), labels[:, :, lo:hi])

    aff = rpi_affine(spec.voxel_dims, (nx, ny, nz))
    mask = BinaryMask(Volume(data, aff), check=False)
    label_vol = Volume(labels, aff)
    interior = np.arange(first, first + n_shape)
    return mask, label_vol, AnalyticTruth(interior=interior, **truth)


def perturb(mask: BinaryMask, op: str, layers: int = 1, connectivity: int = 6) -> BinaryMask:
    """Dilate or erode by ``layers`` 6-connected layers."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if connectivity != 6:
        raise ValueError("only 6-connectivity is supported")
    if op not in ("dilate", "erode"):
        raise ValueError(f"op must be 'dilate' or 'erode', got {op!r}")
    fn = kernels.dilate6 if op == "dilate" else kernels.erode6
    data = mask.as_uint8()
    for _ in range(layers):
        data = fn(data)
    if op == "erode" and not data.any():
        log.warning("erosion by %d layer(s) emptied the mask", layers)
    return BinaryMask(Volume(data, mask.volume.affine), check=False)


def jitter_boundary(mask: BinaryMask, fraction: float, rng: np.random.Generator) -> BinaryMask:
    """Grow or shrink a random ``fraction`` of the boundary by one layer.

    The direction (grow/shrink) is drawn once per call. ``fraction`` 0 returns
    the mask unchanged without consuming randomness.
    """
    if fraction <= 0:
        return mask
    fraction = min(float(fraction), 1.0)
    data = mask.as_uint8()
    grow = bool(rng.integers(0, 2))
    if grow:
        candidates = np.argwhere(kernels.dilate6(data) & (1 - data))
        value = 1
    else:
        candidates = np.argwhere(data & (1 - kernels.erode6(data)))
        value = 0
    if len(candidates):
        pick = rng.random(len(candidates)) < fraction
        sel = candidates[pick]
        data[sel[:, 0], sel[:, 1], sel[:, 2]] = value
    return BinaryMask(Volume(data, mask.volume.affine), check=False)


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def nifti_gz_bytes(volume: Volume, datatype_code=2) -> bytes:
    return gzip.compress(write_nifti(volume, datatype_code), compresslevel=6, mtime=0)


def default_level_plan(n_shape_slices, levels=(2, 3, 4), first=1):
    """Split the shape slices evenly among ``levels`` (first level on top)."""
    bounds = np.linspace(0, n_shape_slices, len(levels) + 1)
    plan = []
    for lv, lo, hi in zip(levels, bounds[:-1], bounds[1:]):
        plan.append((lv, (first + int(round(lo)), first + int(round(hi)))))
    return tuple(plan)


@dataclass
class Cohort:
    manifest_path: Path
    rows: list
    digests: dict


def make_cohort(out_dir, n_subjects=5, contrasts=DEFAULT_CONTRASTS, jitter=0.0, seed=0,
                version_id="v1", boundary_shift=0, voxel_dims=(0.5, 0.5, 1.0),
                length=30.0, levels=(2, 3, 4)) -> Cohort:
    """Write a synthetic test cohort: one mask per (subject, contrast) plus labels.

    Subject anatomy (semi-axes) is drawn from ``seed`` only, so cohorts for
    different ``version_id``/``boundary_shift`` share the same anatomy.
    ``jitter`` is the boundary fraction perturbed independently per contrast;
    ``boundary_shift`` dilates (>0) or erodes (<0) every mask by that many
    layers, mimicking a systematic difference between model versions.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    anatomy = np.random.default_rng([int(seed), 0])
    rows, digests = [], {}
    version_tag = hashlib.sha256(str(version_id).encode()).digest()[:4]
    for s in range(n_subjects):
        subject = f"sub-{s + 1:03d}"
        a = float(anatomy.uniform(3.4, 4.2))
        b = float(anatomy.uniform(5.6, 6.6))
        n_slices = int(math.floor(length / voxel_dims[2] + 0.5))
        spec = PhantomSpec(
            kind="elliptic_cylinder",
            ap_semi_axis=a,
            rl_semi_axis=b,
            length=length,
            voxel_dims=tuple(voxel_dims),
            level_plan=default_level_plan(n_slices, levels),
        )
        base, labels, _ = generate(spec)
        if boundary_shift:
            base = perturb(base, "dilate" if boundary_shift > 0 else "erode", abs(int(boundary_shift)))
        label_rel = f"labels/{subject}_labels.nii.gz"
        payload = nifti_gz_bytes(labels)
        _atomic_write(out / label_rel, payload)
        digests[label_rel] = hashlib.sha256(payload).hexdigest()
        for c, contrast in enumerate(contrasts):
            rng = np.random.default_rng([int(seed), 1, s, c, int.from_bytes(version_tag, "little")])
            mask = jitter_boundary(base, jitter, rng)
            mask_rel = f"{version_id}/{subject}_{contrast}_seg.nii.gz"
            payload = nifti_gz_bytes(mask.volume)
            _atomic_write(out / mask_rel, payload)
            digests[mask_rel] = hashlib.sha256(payload).hexdigest()
            rows.append((subject, contrast, version_id, mask_rel, label_rel, "phantom", "HC"))

    manifest = out / f"manifest_{version_id}.csv"
    lines = [",".join(MANIFEST_COLUMNS)] + [",".join(map(str, r)) for r in rows]
    _atomic_write(manifest, ("\n".join(lines) + "\n").encode())
    return Cohort(manifest, rows, digests)
