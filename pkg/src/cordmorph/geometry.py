"""Per-slice spinal cord morphometrics on binary masks in RPI orientation.

Axis convention for an RPI mask: axis 0 runs right-left (transverse
diameter), axis 1 anterior-posterior (AP diameter), axis 2 is the slice
axis (inferior-superior).
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NoQualifyingSlices, NotBinary, NotRPI
from .nifti_io import Volume

METRICS = (
    "area",
    "ap_diameter",
    "transverse_diameter",
    "compression_ratio",
    "eccentricity",
    "solidity",
)

CSV_COLUMNS = (
    "subject",
    "contrast",
    "model_version",
    "slice_index",
    "level",
    "area_mm2",
    "ap_diameter_mm",
    "transverse_diameter_mm",
    "compression_ratio",
    "eccentricity",
    "solidity",
)

_REGIONS = (("C", 1, 7), ("T", 8, 19), ("L", 20, 24), ("S", 25, 29))


def level_name(level: int) -> str:
    """2 -> 'C2', 8 -> 'T1', 20 -> 'L1'."""
    for prefix, first, last in _REGIONS:
        if first <= level <= last:
            return f"{prefix}{level - first + 1}"
    return str(level)


def parse_level(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    text = str(name).strip().upper()
    if text.isdigit():
        return int(text)
    for prefix, first, last in _REGIONS:
        if text.startswith(prefix) and text[1:].isdigit():
            level = first + int(text[1:]) - 1
            if first <= level <= last:
                return level
    raise ValueError(f"unknown vertebral level {name!r}")


def level_range_key(levels) -> str:
    """Tag for a level set, e.g. {2, 3} -> 'C2-C3'."""
    levels = sorted({parse_level(lv) for lv in levels})
    if not levels:
        raise ValueError("empty level set")
    if len(levels) == 1:
        return level_name(levels[0])
    if levels == list(range(levels[0], levels[-1] + 1)):
        return f"{level_name(levels[0])}-{level_name(levels[-1])}"
    return "+".join(level_name(lv) for lv in levels)


class BinaryMask:
    """A {0,1} volume in RPI orientation."""

    __slots__ = ("volume",)

    def __init__(self, volume: Volume, *, check=True):
        if check:
            if volume.orientation != "RPI":
                raise NotRPI(f"mask orientation is {volume.orientation}, expected RPI")
            vox = volume.voxels
            if not np.all((vox == 0) | (vox == 1)):
                raise NotBinary("mask voxels must be exactly 0 or 1")
        self.volume = volume

    @classmethod
    def from_array(cls, data, voxel_dims=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        """Wrap a {0,1} array as an RPI mask with the given voxel dims."""
        d0, d1, d2 = (float(d) for d in voxel_dims)
        aff = np.diag([d0, -d1, -d2, 1.0])
        aff[:3, 3] = origin
        return cls(Volume(np.asarray(data, dtype=np.float64), aff))

    @property
    def data(self):
        return self.volume.voxels

    @property
    def extents(self):
        return self.volume.extents

    @property
    def voxel_dims(self):
        return self.volume.voxel_dims

    @property
    def n_voxels(self) -> int:
        return int(np.count_nonzero(self.volume.voxels))

    @property
    def is_empty(self) -> bool:
        return self.n_voxels == 0

    def as_uint8(self):
        return self.volume.voxels.astype(np.uint8)

    def replace(self, data) -> "BinaryMask":
        return BinaryMask(Volume(np.asarray(data, dtype=np.float64), self.volume.affine))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.volume == other.volume

    __hash__ = None

    def __repr__(self):
        return f"BinaryMask(extents={self.extents}, n_voxels={self.n_voxels})"


def binarize(volume: Volume, threshold: float = 0.5) -> BinaryMask:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if volume.orientation != "RPI":
        raise NotRPI(f"volume orientation is {volume.orientation}; reorient to RPI first")
    data = (volume.voxels >= threshold).astype(np.float64)
    return BinaryMask(Volume(data, volume.affine), check=False)


@dataclass
class SliceMorphometrics:
    """Shape measures of one axial slice. ``None`` marks an undefined value."""

    slice_index: int
    level: int | None = None
    area: float = 0.0
    ap_diameter: float | None = None
    transverse_diameter: float | None = None
    compression_ratio: float | None = None
    eccentricity: float | None = None
    solidity: float | None = None

    @property
    def is_empty(self) -> bool:
        return self.area == 0.0

    def value(self, metric):
        if metric not in METRICS:
            raise KeyError(f"unknown metric {metric!r}")
        return getattr(self, metric)


def _check_slice(mask, slice_index):
    nz = mask.extents[2]
    if not 0 <= slice_index < nz:
        raise IndexError(f"slice {slice_index} outside [0, {nz})")


def slice_area(mask: BinaryMask, slice_index: int) -> float:
    _check_slice(mask, slice_index)
    d0, d1, _ = mask.voxel_dims
    return float(np.count_nonzero(mask.data[:, :, slice_index])) * d0 * d1


def shape_metrics(mask: BinaryMask, slice_index: int, level=None) -> SliceMorphometrics:
    _check_slice(mask, slice_index)
    d0, d1, _ = mask.voxel_dims
    ii, jj = np.nonzero(mask.data[:, :, slice_index])
    if ii.size == 0:
        return SliceMorphometrics(slice_index=slice_index, level=level)

    area = ii.size * d0 * d1
    transverse = float(ii.max() - ii.min() + 1) * d0
    ap = float(jj.max() - jj.min() + 1) * d1

    # anchored at the bounding-box corner so whole-voxel shifts give identical floats
    coords = np.column_stack(((ii - ii.min()) * d0, (jj - jj.min()) * d1))
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / ii.size
    lam_min, lam_max = np.linalg.eigvalsh(cov)
    if lam_max <= 0 or math.isclose(lam_min, lam_max, rel_tol=1e-12, abs_tol=1e-15):
        ecc = 0.0
    else:
        ecc = math.sqrt(max(0.0, 1.0 - max(lam_min, 0.0) / lam_max))

    # Convex area in the same voxel units as ``area``: voxel centres inside or on
    # the hull of occupied centres. Digitally convex slices score exactly 1.
    solidity = ii.size / kernels.hull_lattice_count(ii, jj)

    return SliceMorphometrics(
        slice_index=slice_index,
        level=level,
        area=float(area),
        ap_diameter=ap,
        transverse_diameter=transverse,
        compression_ratio=ap / transverse,
        eccentricity=float(ecc),
        solidity=float(solidity),
    )


def slice_levels(labels, mask: BinaryMask | None = None) -> dict:
    """Map slice index -> vertebral level.

    ``labels`` is either a mapping (returned as-is, ints only) or a label
    :class:`Volume` aligned with the mask. For volumes a slice takes the
    majority level of its labelled voxels, restricted to cord voxels when
    ``mask`` is given; ties go to the smaller level.
    """
    if labels is None:
        return {}
    if isinstance(labels, dict):
        return {int(k): int(v) for k, v in labels.items() if v is not None}
    lab = np.rint(labels.voxels).astype(np.int64)
    if np.any(lab < 0):
        raise ValueError("level labels must be non-negative")
    if mask is not None:
        if labels.extents != mask.extents:
            raise ValueError(f"label extents {labels.extents} != mask extents {mask.extents}")
        lab = np.where(mask.data > 0, lab, 0)
    out = {}
    for k in range(lab.shape[2]):
        vals = lab[:, :, k]
        vals = vals[vals > 0]
        if vals.size == 0:
            continue
        counts = Counter(vals.tolist())
        top = max(counts.values())
        out[k] = min(lv for lv, c in counts.items() if c == top)
    return out


def compute_slices(mask: BinaryMask, labels=None, angle_factors=None) -> list:
    """Morphometrics for every axial slice.

    ``angle_factors`` optionally maps slice index -> multiplicative area
    correction (e.g. a precomputed cosine of the cord tilt).
    """
    levels = slice_levels(labels, mask)
    out = []
    for k in range(mask.extents[2]):
        rec = shape_metrics(mask, k, level=levels.get(k))
        if angle_factors is not None and not rec.is_empty:
            factor = angle_factors.get(k, 1.0) if isinstance(angle_factors, dict) else angle_factors[k]
            rec.area *= float(factor)
        out.append(rec)
    return out


def _mean(values):
    return math.fsum(values) / len(values)


def aggregate_over_levels(per_slice, labels, levels, metric="area") -> float:
    """Mean of ``metric`` over non-empty slices whose level is in ``levels``.

    When ``labels`` is None the ``level`` stored on each record is used.
    """
    wanted = {parse_level(lv) for lv in levels}
    mapping = slice_levels(labels) if labels is not None else None
    vals = []
    for rec in per_slice:
        level = mapping.get(rec.slice_index) if mapping is not None else rec.level
        if rec.is_empty or level not in wanted:
            continue
        v = rec.value(metric)
        if v is not None:
            vals.append(v)
    if not vals:
        raise NoQualifyingSlices(f"no non-empty slice at levels {sorted(wanted)}")
    return _mean(vals)


def mean_csa_all_slices(per_slice) -> float:
    vals = [rec.area for rec in per_slice if not rec.is_empty]
    if not vals:
        raise NoQualifyingSlices("mask is empty")
    return _mean(vals)


def gap_count(per_slice) -> int:
    """Empty slices lying between the first and last non-empty slice."""
    occupied = [r.slice_index for r in per_slice if not r.is_empty]
    if not occupied:
        return 0
    lo, hi = min(occupied), max(occupied)
    return sum(1 for r in per_slice if lo < r.slice_index < hi and r.is_empty)


@dataclass
class SubjectMorphometrics:
    subject_id: str
    contrast: str
    model_version: str
    slices: list
    aggregates: dict = field(default_factory=dict)
    gaps: int = 0

    @classmethod
    def compute(cls, subject_id, contrast, model_version, mask, labels=None,
                level_sets=(("C2", "C3"),), metrics=METRICS):
        slices = compute_slices(mask, labels)
        aggregates = {}
        for metric in metrics:
            non_empty = [r.value(metric) for r in slices if not r.is_empty and r.value(metric) is not None]
            if non_empty:
                aggregates[(metric, "all")] = _mean(non_empty)
            for levels in level_sets:
                try:
                    aggregates[(metric, level_range_key(levels))] = aggregate_over_levels(
                        slices, None, levels, metric
                    )
                except NoQualifyingSlices:
                    pass
        return cls(subject_id, contrast, model_version, slices, aggregates, gap_count(slices))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def slice_rows(subject_id, contrast, model_version, per_slice):
    for rec in per_slice:
        yield (
            subject_id,
            contrast,
            model_version,
            rec.slice_index,
            rec.level,
            rec.area,
            rec.ap_diameter,
            rec.transverse_diameter,
            rec.compression_ratio,
            rec.eccentricity,
            rec.solidity,
        )


def slices_to_csv(rows, fh=None) -> str:
    """Write per-slice rows (tuples in ``CSV_COLUMNS`` order) as CSV."""
    buf = fh if fh is not None else io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue() if fh is None else ""


def slices_from_csv(text) -> list:
    """Parse per-slice CSV back into ``(subject, contrast, version, SliceMorphometrics)`` tuples."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected columns {reader.fieldnames}")
    out = []

    def num(s, cast=float):
        return None if s == "" else cast(s)

    for row in reader:
        rec = SliceMorphometrics(
            slice_index=int(row["slice_index"]),
            level=num(row["level"], int),
            area=float(row["area_mm2"]),
            ap_diameter=num(row["ap_diameter_mm"]),
            transverse_diameter=num(row["transverse_diameter_mm"]),
            compression_ratio=num(row["compression_ratio"]),
            eccentricity=num(row["eccentricity"]),
            solidity=num(row["solidity"]),
        )
        out.append((row["subject"], row["contrast"], row["model_version"], rec))
    return out
