import gzip
import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cordmorph import errors
from cordmorph.nifti_io import (
    Volume,
    load,
    orientation_from_affine,
    parse_nifti,
    reorient,
    resample_mask,
    save,
    write_nifti,
)
from nifti_mutations import MUTATIONS
from oracles import world


def hand_header(endian="<", dim=(3, 4, 4, 4, 1, 1, 1, 1), datatype=2, bitpix=8,
                pixdim=(1.0, 1.0, 1.0, 1.0), slope=1.0, inter=0.0, vox_offset=352.0,
                magic=b"n+1\x00"):
    """Header bytes assembled field by field from the NIfTI-1 layout."""
    buf = bytearray(352)
    struct.pack_into(endian + "i", buf, 0, 348)
    struct.pack_into(endian + "8h", buf, 40, *dim)
    struct.pack_into(endian + "h", buf, 70, datatype)
    struct.pack_into(endian + "h", buf, 72, bitpix)
    struct.pack_into(endian + "8f", buf, 76, 1.0, *pixdim[1:], 0, 0, 0, 0)
    struct.pack_into(endian + "f", buf, 108, vox_offset)
    struct.pack_into(endian + "f", buf, 112, slope)
    struct.pack_into(endian + "f", buf, 116, inter)
    struct.pack_into("4s", buf, 344, magic)
    return bytes(buf)


def ones_file():
    return hand_header() + b"\x01" * 64


# --- parse -------------------------------------------------------------------

def test_parse_all_ones():
    v = parse_nifti(ones_file())
    assert v.extents == (4, 4, 4)
    assert v.voxels.dtype == np.float64
    assert np.all(v.voxels == 1.0)
    np.testing.assert_array_equal(v.affine, np.eye(4))


def test_parse_truncated_payload():
    with pytest.raises(errors.TruncatedData):
        parse_nifti(hand_header() + b"\x01" * 63)


def test_gzip_is_transparent():
    assert parse_nifti(gzip.compress(ones_file())) == parse_nifti(ones_file())


def test_big_endian_int16():
    raw = np.arange(24, dtype=">i2").reshape((2, 3, 4), order="F")
    data = hand_header(">", dim=(3, 2, 3, 4, 1, 1, 1, 1), datatype=4, bitpix=16) + raw.tobytes(order="F")
    v = parse_nifti(data)
    np.testing.assert_array_equal(v.voxels, raw.astype(np.float64))


def test_fortran_order_layout():
    payload = bytes(range(24))
    v = parse_nifti(hand_header(dim=(3, 2, 3, 4, 1, 1, 1, 1)) + payload)
    # x varies fastest on disk
    assert v.voxels[1, 0, 0] == 1 and v.voxels[0, 1, 0] == 2 and v.voxels[0, 0, 1] == 6


@pytest.mark.parametrize("slope, inter, expected", [(2.0, 3.0, 5.0), (0.0, 0.0, 1.0), (0.0, -1.5, -0.5), (0.5, 0.0, 0.5)])
def test_scaling_applied(slope, inter, expected):
    v = parse_nifti(hand_header(slope=slope, inter=inter) + b"\x01" * 64)
    assert np.all(v.voxels == expected)


def test_single_frame_4d_accepted():
    v = parse_nifti(hand_header(dim=(4, 4, 4, 4, 1, 1, 1, 1)) + b"\x01" * 64)
    assert v.extents == (4, 4, 4)


def test_pixdim_diagonal_affine():
    v = parse_nifti(hand_header(pixdim=(1.0, 0.5, 0.75, 2.0)) + b"\x00" * 64)
    np.testing.assert_array_equal(v.affine, np.diag([0.5, 0.75, 2.0, 1.0]))


def test_qform_affine():
    buf = bytearray(hand_header(pixdim=(1.0, 0.5, 0.5, 2.0)))
    struct.pack_into("<h", buf, 252, 1)
    # 180 degrees about x: quaternion (b, c, d) = (1, 0, 0)
    struct.pack_into("<6f", buf, 256, 1.0, 0.0, 0.0, 10.0, 20.0, 30.0)
    v = parse_nifti(bytes(buf) + b"\x00" * 64)
    expected = np.array([[0.5, 0, 0, 10], [0, -0.5, 0, 20], [0, 0, -2.0, 30], [0, 0, 0, 1]])
    np.testing.assert_allclose(v.affine, expected, atol=1e-12)
    assert v.orientation == "RPI"


def test_sform_takes_precedence():
    buf = bytearray(hand_header())
    struct.pack_into("<h", buf, 252, 1)
    struct.pack_into("<6f", buf, 256, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<h", buf, 254, 2)
    for r, row in enumerate(([2, 0, 0, 1], [0, 3, 0, 2], [0, 0, 4, 3])):
        struct.pack_into("<4f", buf, 280 + 16 * r, *row)
    v = parse_nifti(bytes(buf) + b"\x00" * 64)
    np.testing.assert_array_equal(v.affine[:3], [[2, 0, 0, 1], [0, 3, 0, 2], [0, 0, 4, 3]])


@pytest.mark.parametrize("name, mutate, exc", MUTATIONS, ids=[m[0] for m in MUTATIONS])
def test_mutations_raise_typed_errors(name, mutate, exc):
    raw = write_nifti(Volume(np.ones((4, 4, 4)), np.eye(4)), "uint8")
    with pytest.raises(exc):
        parse_nifti(mutate(raw))


def test_mutation_errors_share_base_class():
    for _, _, exc in MUTATIONS:
        assert issubclass(exc, errors.CordMorphError)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 351), st.integers(0, 255))
def test_random_header_byte_never_crashes(pos, value):
    raw = bytearray(write_nifti(Volume(np.ones((4, 4, 4)), np.eye(4)), "uint8"))
    raw[pos] = value
    try:
        v = parse_nifti(bytes(raw))
    except errors.CordMorphError:
        return
    assert v.voxels.shape == tuple(v.extents)


# --- write ---------------------------------------------------------------------

def test_roundtrip_ones_bit_identical():
    data = ones_file()
    out = write_nifti(parse_nifti(data), 2)
    assert out[352:] == data[352:]


@pytest.mark.parametrize("code, lo, hi", [(2, 0, 255), (4, -32768, 32767)])
def test_roundtrip_integer_types_exact(code, lo, hi, rng):
    vox = rng.integers(lo, hi + 1, size=(5, 6, 7)).astype(np.float64)
    vox.flat[:2] = (lo, hi)
    aff = np.array([[0.5, 0, 0, -3.25], [0, -0.75, 0, 12.5], [0, 0, -2.0, 7.0], [0, 0, 0, 1]])
    v = parse_nifti(write_nifti(Volume(vox, aff), code))
    assert v.extents == (5, 6, 7)
    np.testing.assert_array_equal(v.voxels, vox)
    assert np.max(np.abs(v.affine - aff)) <= 1e-6


def test_file_roundtrip(tmp_path):
    v = Volume(np.arange(60, dtype=float).reshape(3, 4, 5), np.diag([1.0, -1.0, -1.0, 1.0]))
    for name in ("a.nii", "a.nii.gz"):
        save(v, tmp_path / name, "int16")
        assert load(tmp_path / name) == v
    assert (tmp_path / "a.nii.gz").read_bytes()[:2] == b"\x1f\x8b"


def test_write_precision_loss():
    with pytest.raises(errors.PrecisionLoss):
        write_nifti(Volume(np.full((2, 2, 2), 0.5), np.eye(4)), 2)


@pytest.mark.parametrize("value, code", [(256.0, 2), (-1.0, 2), (40000.0, 4)])
def test_write_overflow(value, code):
    with pytest.raises(errors.ValueOverflow):
        write_nifti(Volume(np.full((2, 2, 2), value), np.eye(4)), code)


def test_write_unsupported_datatype():
    with pytest.raises(errors.UnsupportedDatatype):
        write_nifti(Volume(np.zeros((2, 2, 2)), np.eye(4)), 128)


def test_float_roundtrip():
    vox = np.linspace(-1, 1, 27).reshape(3, 3, 3)
    assert np.array_equal(parse_nifti(write_nifti(Volume(vox, np.eye(4)), 64)).voxels, vox)


@pytest.mark.parametrize("shape", [(0, 4, 4), (4, 0, 4), (4, 4, 0), (4, 4)])
def test_volume_rejects_bad_extents(shape):
    with pytest.raises(errors.InvalidVolume):
        Volume(np.zeros(shape), np.eye(4))


def test_volume_is_immutable():
    v = Volume(np.zeros((2, 2, 2)), np.eye(4))
    with pytest.raises(ValueError):
        v.voxels[0, 0, 0] = 1


def test_voxel_dims_are_column_norms():
    aff = np.array([[0, 0, 2.0, 0], [3.0, 0, 0, 0], [0, 4.0, 0, 0], [0, 0, 0, 1]])
    assert Volume(np.zeros((2, 2, 2)), aff).voxel_dims == (3.0, 4.0, 2.0)


# --- orientation -------------------------------------------------------------

def test_orientation_examples():
    assert orientation_from_affine(np.eye(4)) == "RAS"
    assert orientation_from_affine(np.diag([1, -1, -1, 1])) == "RPI"
    swapped = np.eye(4)[:, [0, 2, 1, 3]]
    assert orientation_from_affine(swapped) == "RSA"


def test_orientation_oblique_dominant():
    a = np.eye(4)
    a[:3, :3] = [[0.9, 0.3, 0], [-0.2, 0.95, 0], [0, 0.1, -1.0]]
    assert orientation_from_affine(a) == "RAI"


def test_orientation_errors():
    with pytest.raises(errors.SingularAffine):
        orientation_from_affine(np.diag([1, 0, 1, 1]))
    a = np.eye(4)
    a[:3, :3] = [[1, 1, 0], [-1, 1, 0], [0, 0, 1]]
    with pytest.raises(errors.AmbiguousAxis):
        orientation_from_affine(a)
    b = np.eye(4)
    b[:3, :3] = [[1.0, 0.9, 0], [0.1, 0.2, 1.0], [0, 0, 0.3]]
    with pytest.raises(errors.AmbiguousAxis):
        orientation_from_affine(b)


ALL_CODES = ["".join(p) for pair in itertools.product("RL", "AP", "SI")
             for p in itertools.permutations(pair)]


def test_reorient_example_marked_voxel():
    vox = np.zeros((4, 5, 6))
    vox[1, 2, 3] = 1
    v = Volume(vox, np.eye(4))
    r = reorient(v, "RPI")
    assert r.orientation == "RPI"
    assert [tuple(i) for i in np.argwhere(r.voxels)] == [(1, 2, 2)]
    np.testing.assert_allclose(world(r.affine, (1, 2, 2)), world(v.affine, (1, 2, 3)))


def test_reorient_identity_and_involution(rng):
    v = Volume(rng.random((3, 4, 5)), np.diag([0.5, 0.7, 2.0, 1.0]))
    assert reorient(v, v.orientation) == v
    assert reorient(reorient(v, "RPI"), v.orientation) == v


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(ALL_CODES), st.sampled_from(ALL_CODES), st.integers(0, 2 ** 32 - 1))
def test_reorient_preserves_world_positions(start, target, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in rng.integers(2, 6, size=3))
    # build an affine whose orientation is ``start``
    aff = np.eye(4)
    aff[:3, :3] = 0
    letters = {"R": (0, 1), "L": (0, -1), "A": (1, 1), "P": (1, -1), "S": (2, 1), "I": (2, -1)}
    for col, letter in enumerate(start):
        axis, sign = letters[letter]
        aff[axis, col] = sign * rng.uniform(0.3, 2.0)
    aff[:3, 3] = rng.uniform(-50, 50, size=3)
    v = Volume(rng.random(shape), aff)
    assert v.orientation == start
    r = reorient(v, target)
    assert orientation_from_affine(r.affine) == target
    assert sorted(r.voxels.ravel()) == sorted(v.voxels.ravel())
    # every voxel value sits at the same world coordinate
    src = {tuple(np.round(world(v.affine, idx), 9)): v.voxels[idx] for idx in np.ndindex(shape)}
    for idx in np.ndindex(r.extents):
        assert src[tuple(np.round(world(r.affine, idx), 9))] == r.voxels[idx]


# --- resampling ---------------------------------------------------------------

def test_resample_identity_grid(rng):
    v = Volume(rng.random((4, 5, 6)), np.diag([0.5, -0.5, -1.0, 1.0]))
    r = resample_mask(v, v.voxel_dims)
    assert r.extents == v.extents
    assert np.max(np.abs(r.voxels - v.voxels)) <= 1e-12
    np.testing.assert_allclose(r.affine, v.affine)


def test_resample_constant_half_resolution():
    v = Volume(np.ones((8, 8, 8)), np.diag([0.5, 0.5, 0.5, 1.0]))
    r = resample_mask(v, (1.0, 1.0, 1.0))
    assert r.extents == (4, 4, 4)
    assert np.all(r.voxels == 1.0)
    assert r.voxel_dims == (1.0, 1.0, 1.0)


def test_resample_keeps_world_extent():
    v = Volume(np.zeros((8, 6, 4)), np.diag([1.0, -1.0, -2.0, 1.0]))
    r = resample_mask(v, (0.5, 0.5, 1.0))
    # first and last voxel centres inset by half a new voxel from the old grid edge
    np.testing.assert_allclose(world(r.affine, (0, 0, 0)), world(v.affine, (-0.25, -0.25, -0.25)))
    n = np.array(r.extents) - 1
    np.testing.assert_allclose(world(r.affine, n), world(v.affine, np.array(v.extents) - 0.75))


def test_resample_upsampled_cube_cross_section():
    vox = np.zeros((10, 10, 10))
    vox[3:7, 3:7, 3:7] = 1.0  # cube spanning world [2.5, 6.5] mm on each axis
    v = Volume(vox, np.eye(4))
    r = resample_mask(v, (0.5, 0.5, 0.5))
    binary = r.voxels >= 0.5
    k = int(np.argmin([abs(world(r.affine, (0, 0, kk))[2] - 4.75) for kk in range(r.extents[2])]))
    area = binary[:, :, k].sum() * 0.25
    # brute-force oracle: new voxel centres falling inside the original world cross-section
    inside = sum(
        1
        for i in range(r.extents[0])
        for j in range(r.extents[1])
        if all(2.5 <= c <= 6.5 for c in world(r.affine, (i, j, k))[:2])
    )
    oracle = inside * 0.25
    assert oracle == 16.0
    # one layer of 0.5 mm voxels around a 4 x 4 mm outline
    assert abs(area - oracle) <= 4 * 4.0 * 0.5 + 4 * 0.25


def test_resample_degenerate_target():
    v = Volume(np.ones((2, 2, 2)), np.eye(4))
    with pytest.raises(errors.DegenerateTarget):
        resample_mask(v, (10.0, 1.0, 1.0))
    with pytest.raises(errors.DegenerateTarget):
        resample_mask(v, (0.0, 1.0, 1.0))
