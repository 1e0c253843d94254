"""NIfTI-1 reading/writing, orientation codes and mask resampling.

Only single-file NIfTI-1 (``n+1``), plain or gzip-wrapped, is handled. All
voxel data is held as float64 after applying ``scl_slope``/``scl_inter``.
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AmbiguousAxis,
    BadMagic,
    DegenerateTarget,
    InvalidHeader,
    InvalidVolume,
    MultiFrame,
    NotNifti1,
    PrecisionLoss,
    SingularAffine,
    TruncatedData,
    UnsupportedDatatype,
    ValueOverflow,
)

HEADER_SIZE = 348
MIN_VOX_OFFSET = 352

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
DATATYPE_NAMES = {"uint8": 2, "int16": 4, "int32": 8, "float32": 16, "float64": 64}

# (name, struct format, offset) for the fields this module reads or writes.
_FIELDS = (
    ("sizeof_hdr", "i", 0),
    ("dim", "8h", 40),
    ("intent_p", "3f", 56),
    ("datatype", "h", 70),
    ("bitpix", "h", 72),
    ("pixdim", "8f", 76),
    ("vox_offset", "f", 108),
    ("scl_slope", "f", 112),
    ("scl_inter", "f", 116),
    ("xyzt_units", "B", 123),
    ("qform_code", "h", 252),
    ("sform_code", "h", 254),
    ("quatern", "6f", 256),
    ("srow_x", "4f", 280),
    ("srow_y", "4f", 296),
    ("srow_z", "4f", 312),
    ("magic", "4s", 344),
)

_AXIS_LETTERS = (("R", "L"), ("A", "P"), ("S", "I"))
_LETTER_AXIS = {
    letter: (world_axis, sign)
    for world_axis, pair in enumerate(_AXIS_LETTERS)
    for letter, sign in zip(pair, (1, -1))
}


@dataclass(frozen=True)
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple
    datatype_code: int
    bitpix: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    quatern: tuple
    srow: tuple
    magic: bytes
    endian: str = "<"

    @property
    def extents(self):
        return tuple(int(d) for d in self.dim[1:4])


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3-D scalar grid with a voxel-to-world (mm) affine."""

    voxels: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        vox = np.array(self.voxels, dtype=np.float64, copy=True)
        if vox.ndim != 3:
            raise InvalidVolume(f"volume must be 3-D, got shape {vox.shape}")
        if min(vox.shape) == 0:
            raise InvalidVolume(f"empty volume extents {vox.shape}")
        aff = np.array(self.affine, dtype=np.float64, copy=True)
        if aff.shape != (4, 4):
            raise InvalidVolume("affine must be 4x4")
        if not np.all(np.isfinite(aff)):
            raise InvalidVolume("affine has non-finite entries")
        if np.any(np.linalg.norm(aff[:3, :3], axis=0) <= 0):
            raise InvalidVolume("affine has a zero-length axis")
        vox.setflags(write=False)
        aff.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "affine", aff)

    @property
    def extents(self):
        return tuple(int(n) for n in self.voxels.shape)

    @property
    def voxel_dims(self):
        return tuple(float(v) for v in np.linalg.norm(self.affine[:3, :3], axis=0))

    @property
    def orientation(self):
        return orientation_from_affine(self.affine)

    def with_voxels(self, voxels):
        return Volume(voxels, self.affine)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.voxels.shape == other.voxels.shape
            and np.array_equal(self.voxels, other.voxels)
            and np.array_equal(self.affine, other.affine)
        )

    __hash__ = None


# --- header codec -------------------------------------------------------------

def _unpack_fields(raw, endian):
    out = {}
    for name, fmt, offset in _FIELDS:
        vals = struct.unpack_from(endian + fmt, raw, offset)
        out[name] = vals[0] if len(vals) == 1 else vals
    return out


def _detect_endian(raw):
    if len(raw) < HEADER_SIZE:
        raise NotNifti1(f"only {len(raw)} bytes; a NIfTI-1 header needs {HEADER_SIZE}")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            return endian
    raise NotNifti1("sizeof_hdr is not 348 in either byte order")


def parse_header(raw) -> NiftiHeader:
    endian = _detect_endian(raw)
    f = _unpack_fields(raw, endian)
    magic = f["magic"]
    if magic == b"ni1\x00":
        raise BadMagic("header/data pair NIfTI ('ni1') is not supported; use a single .nii file")
    if magic != b"n+1\x00":
        raise BadMagic(f"bad magic {magic!r}")
    dim = tuple(int(d) for d in f["dim"])
    if dim[0] not in (3, 4):
        raise InvalidHeader(f"dim[0]={dim[0]}; only 3-D volumes are supported")
    if dim[0] == 4 and dim[4] != 1:
        raise MultiFrame(f"dim[4]={dim[4]}; only a single 3-D frame is supported")
    if any(d <= 0 for d in dim[1:4]):
        raise InvalidHeader(f"non-positive grid extents {dim[1:4]}")
    code = int(f["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code}")
    if int(f["bitpix"]) != DATATYPES[code].itemsize * 8:
        raise InvalidHeader(f"bitpix {f['bitpix']} does not match datatype {code}")
    pixdim = tuple(float(p) for p in f["pixdim"])
    if not all(np.isfinite(pixdim[1:4])) or any(p <= 0 for p in pixdim[1:4]):
        raise InvalidHeader(f"pixdim[1..3] must be positive, got {pixdim[1:4]}")
    vox_offset = float(f["vox_offset"])
    if not np.isfinite(vox_offset) or vox_offset < MIN_VOX_OFFSET or vox_offset != int(vox_offset):
        raise InvalidHeader(f"vox_offset {vox_offset} is invalid for a single-file NIfTI-1")
    slope, inter = float(f["scl_slope"]), float(f["scl_inter"])
    if not (np.isfinite(slope) and np.isfinite(inter)):
        raise InvalidHeader("scl_slope/scl_inter must be finite")
    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        dim=dim,
        datatype_code=code,
        bitpix=int(f["bitpix"]),
        pixdim=pixdim,
        vox_offset=vox_offset,
        scl_slope=slope,
        scl_inter=inter,
        qform_code=int(f["qform_code"]),
        sform_code=int(f["sform_code"]),
        quatern=tuple(float(q) for q in f["quatern"]),
        srow=(f["srow_x"], f["srow_y"], f["srow_z"]),
        magic=magic,
        endian=endian,
    )


def quaternion_affine(quatern, pixdim):
    """Affine from the qform quaternion parameters (NIfTI-1 method 2)."""
    b, c, d, qx, qy, qz = quatern
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < -1e-6:
        raise InvalidHeader("quaternion (b, c, d) has norm greater than 1")
    a = np.sqrt(max(a2, 0.0))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    aff = np.eye(4)
    aff[:3, :3] = rot * np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff[:3, 3] = (qx, qy, qz)
    return aff


def header_affine(hdr: NiftiHeader):
    if hdr.sform_code > 0:
        aff = np.eye(4)
        aff[:3, :] = np.asarray(hdr.srow, dtype=np.float64)
    elif hdr.qform_code > 0:
        aff = quaternion_affine(hdr.quatern, hdr.pixdim)
    else:
        aff = np.diag([hdr.pixdim[1], hdr.pixdim[2], hdr.pixdim[3], 1.0])
    if not np.all(np.isfinite(aff)):
        raise InvalidHeader("affine has non-finite entries")
    if abs(np.linalg.det(aff[:3, :3])) <= 1e-12 * max(np.abs(aff[:3, :3]).max(), 1.0) ** 3:
        raise SingularAffine("header affine is singular")
    return aff


def _maybe_gunzip(data):
    if data[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(data)
        except (OSError, EOFError, zlib.error) as exc:
            raise TruncatedData(f"corrupt gzip container: {exc}") from exc
    return data


def parse_nifti(data: bytes) -> Volume:
    raw = _maybe_gunzip(bytes(data))
    hdr = parse_header(raw)
    nx, ny, nz = hdr.extents
    dtype = DATATYPES[hdr.datatype_code].newbyteorder(hdr.endian)
    start = int(hdr.vox_offset)
    nbytes = nx * ny * nz * dtype.itemsize
    if len(raw) < start + nbytes:
        raise TruncatedData(f"payload has {max(len(raw) - start, 0)} bytes, expected {nbytes}")
    flat = np.frombuffer(raw, dtype=dtype, count=nx * ny * nz, offset=start)
    vox = flat.reshape((nx, ny, nz), order="F").astype(np.float64)
    slope = hdr.scl_slope if hdr.scl_slope != 0 else 1.0
    if slope != 1.0 or hdr.scl_inter != 0.0:
        vox = vox * slope + hdr.scl_inter
    if not np.all(np.isfinite(vox)):
        raise InvalidHeader("voxel data contains non-finite values")
    return Volume(vox, header_affine(hdr))


def load(path) -> Volume:
    return parse_nifti(Path(path).read_bytes())


def _check_representable(vox, dtype):
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        if vox.min() < info.min or vox.max() > info.max:
            raise ValueOverflow(
                f"values span [{vox.min()}, {vox.max()}], outside {dtype.name} range"
            )
        if not np.array_equal(vox, np.round(vox)):
            raise PrecisionLoss(f"non-integer values cannot be stored as {dtype.name}; binarize first")
    elif dtype == np.float32:
        big = np.finfo(np.float32).max
        if np.abs(vox).max() > big:
            raise ValueOverflow("values exceed float32 range")


def write_nifti(volume: Volume, datatype_code=2) -> bytes:
    """Serialize to single-file NIfTI-1 (little endian, sform_code=1)."""
    if isinstance(datatype_code, str):
        datatype_code = DATATYPE_NAMES.get(datatype_code, -1)
    if datatype_code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype_code}")
    dtype = DATATYPES[datatype_code].newbyteorder("<")
    vox = volume.voxels
    _check_representable(vox, dtype)

    hdr = bytearray(MIN_VOX_OFFSET)
    nx, ny, nz = volume.extents
    zooms = volume.voxel_dims
    aff = volume.affine

    def put(fmt, offset, *vals):
        struct.pack_into("<" + fmt, hdr, offset, *vals)

    put("i", 0, HEADER_SIZE)
    put("8h", 40, 3, nx, ny, nz, 1, 1, 1, 1)
    put("h", 70, datatype_code)
    put("h", 72, dtype.itemsize * 8)
    qfac = 1.0 if np.linalg.det(aff[:3, :3]) >= 0 else -1.0
    put("8f", 76, qfac, *zooms, 0.0, 0.0, 0.0, 0.0)
    put("f", 108, float(MIN_VOX_OFFSET))
    put("f", 112, 1.0)
    put("f", 116, 0.0)
    put("B", 123, 2)  # mm
    put("h", 252, 0)
    put("h", 254, 1)
    for row in range(3):
        put("4f", 280 + 16 * row, *aff[row, :4])
    put("4s", 344, b"n+1\x00")
    payload = np.asarray(vox).astype(dtype).tobytes(order="F")
    return bytes(hdr) + payload


def save(volume: Volume, path, datatype_code=2):
    data = write_nifti(volume, datatype_code)
    path = Path(path)
    if path.name.endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)
    return path


# --- orientation ------------------------------------------------------------

def _validate_code(code):
    code = str(code).upper()
    if len(code) != 3 or any(c not in _LETTER_AXIS for c in code):
        raise ValueError(f"invalid orientation code {code!r}")
    if len({_LETTER_AXIS[c][0] for c in code}) != 3:
        raise ValueError(f"orientation code {code!r} repeats an anatomical axis")
    return code


def orientation_from_affine(affine) -> str:
    """Three-letter code from the dominant world component of each voxel axis."""
    m = np.asarray(affine, dtype=np.float64)[:3, :3]
    scale = np.abs(m).max()
    if scale == 0 or abs(np.linalg.det(m)) <= 1e-12 * scale ** 3:
        raise SingularAffine("upper-left 3x3 block is singular")
    letters = []
    used = set()
    for col in range(3):
        mags = np.abs(m[:, col])
        world = int(np.argmax(mags))
        if np.sum(np.isclose(mags, mags[world], rtol=1e-12, atol=0.0)) > 1:
            raise AmbiguousAxis(f"voxel axis {col} is equally aligned with two world axes")
        if world in used:
            raise AmbiguousAxis(f"two voxel axes map to world axis {'xyz'[world]}")
        used.add(world)
        pos, neg = _AXIS_LETTERS[world]
        letters.append(pos if m[world, col] > 0 else neg)
    return "".join(letters)


def reorient(volume: Volume, target: str) -> Volume:
    """Permute/flip axes so the volume's orientation becomes ``target``.

    World coordinates of every voxel are preserved; no interpolation happens.
    """
    target = _validate_code(target)
    current = volume.orientation
    if current == target:
        return volume
    cur_axis = {_LETTER_AXIS[c][0]: (i, _LETTER_AXIS[c][1]) for i, c in enumerate(current)}
    perm, flips = [], []
    for letter in target:
        world, sign = _LETTER_AXIS[letter]
        src, src_sign = cur_axis[world]
        perm.append(src)
        flips.append(sign != src_sign)

    data = np.transpose(volume.voxels, perm)
    # new index -> old index, homogeneous
    to_old = np.zeros((4, 4))
    to_old[3, 3] = 1.0
    for new_ax, (src, flip) in enumerate(zip(perm, flips)):
        if flip:
            data = np.flip(data, axis=new_ax)
            to_old[src, new_ax] = -1.0
            to_old[src, 3] = volume.extents[src] - 1
        else:
            to_old[src, new_ax] = 1.0
    return Volume(np.ascontiguousarray(data), volume.affine @ to_old)


# --- resampling ----------------------------------------------------------------

def _linear_axis(data, axis, coords):
    n = data.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.intp)
    lo = np.minimum(lo, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    w = coords - lo
    shape = [1, 1, 1]
    shape[axis] = -1
    w = w.reshape(shape)
    a = np.take(data, lo, axis=axis)
    b = np.take(data, hi, axis=axis)
    return a * (1.0 - w) + b * w


def resample_mask(volume: Volume, target_voxel_dims) -> Volume:
    """Trilinear resampling onto a grid of ``target_voxel_dims`` covering the same extent.

    The output is left soft; call :func:`cordmorph.geometry.binarize` afterwards.
    """
    target = tuple(float(t) for t in target_voxel_dims)
    if len(target) != 3 or any(not np.isfinite(t) or t <= 0 for t in target):
        raise DegenerateTarget(f"target voxel dims must be three positive numbers, got {target}")
    dims = volume.voxel_dims
    new_shape = []
    for n, d, t in zip(volume.extents, dims, target):
        m = int(np.floor(n * d / t + 0.5))
        if m < 1:
            raise DegenerateTarget(f"axis of {n * d:.3g} mm rounds to 0 voxels at {t} mm")
        new_shape.append(m)

    data = volume.voxels
    starts = []
    for axis, (m, d, t) in enumerate(zip(new_shape, dims, target)):
        ratio = t / d
        start = 0.5 * ratio - 0.5
        starts.append(start)
        if m == volume.extents[axis] and ratio == 1.0:
            continue
        data = _linear_axis(data, axis, start + np.arange(m) * ratio)

    scale = np.array(target) / np.array(dims)
    aff = volume.affine.copy()
    aff[:3, 3] = volume.affine[:3, :3] @ np.array(starts) + volume.affine[:3, 3]
    aff[:3, :3] = volume.affine[:3, :3] * scale
    return Volume(data, aff)
