import csv
import hashlib
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cordmorph import errors
from cordmorph.geometry import shape_metrics, slice_area
from cordmorph.nifti_io import load
from cordmorph.phantom import (
    MANIFEST_COLUMNS,
    PhantomSpec,
    default_level_plan,
    generate,
    jitter_boundary,
    make_cohort,
    perturb,
)
from conftest import mask_from


def ellipse_perimeter(a, b):
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))


def test_box_slices_exact():
    mask, _, truth = generate(PhantomSpec(kind="box", ap_semi_axis=2, rl_semi_axis=2, length=5, voxel_dims=(1, 1, 1)))
    assert len(truth.interior) == 5
    for k in truth.interior:
        assert slice_area(mask, k) == 16.0
    assert slice_area(mask, 0) == 0.0 and slice_area(mask, mask.extents[2] - 1) == 0.0


def test_ellipse_area_within_two_percent():
    mask, _, truth = generate(PhantomSpec(ap_semi_axis=4, rl_semi_axis=3, length=4, voxel_dims=(0.25, 0.25, 1.0)))
    assert truth.area[truth.interior[0]] == pytest.approx(37.699, abs=1e-3)
    for k in truth.interior:
        assert abs(slice_area(mask, k) - truth.area[k]) / truth.area[k] < 0.02


def test_circular_cylinder_symmetry():
    mask, _, truth = generate(PhantomSpec(ap_semi_axis=3.5, rl_semi_axis=3.5, length=3, voxel_dims=(0.5, 0.5, 1.0)))
    for k in truth.interior:
        s = shape_metrics(mask, k)
        assert s.eccentricity <= 0.1
        assert abs(s.compression_ratio - 1.0) <= 0.03


def test_truth_fields():
    _, _, truth = generate(PhantomSpec(ap_semi_axis=4, rl_semi_axis=3, length=3))
    k = truth.interior[0]
    assert truth.ap_diameter[k] == 8.0 and truth.transverse_diameter[k] == 6.0
    assert truth.compression_ratio[k] == pytest.approx(4 / 3)
    assert truth.eccentricity[k] == pytest.approx(math.sqrt(1 - 9 / 16))
    assert truth.solidity[k] == 1.0
    assert np.isnan(truth.area[0])


def test_tapered_cylinder_shrinks():
    mask, _, truth = generate(PhantomSpec(kind="tapered_cylinder", taper_ratio=0.5, length=10))
    areas = [slice_area(mask, k) for k in truth.interior]
    assert areas[0] > areas[-1]
    assert truth.area[truth.interior[-1]] == pytest.approx(truth.area[truth.interior[0]] / 4)


def test_mask_is_rpi_and_labels_follow_plan():
    spec = PhantomSpec(length=6, level_plan=((2, (1, 4)), (3, (4, 7))))
    mask, labels, _ = generate(spec)
    assert mask.volume.orientation == "RPI"
    assert labels.extents == mask.extents
    lab = labels.voxels
    assert set(np.unique(lab[:, :, 1:4][mask.data[:, :, 1:4] > 0])) == {2.0}
    assert set(np.unique(lab[:, :, 4:7][mask.data[:, :, 4:7] > 0])) == {3.0}
    assert np.all(lab[mask.data == 0] == 0)


def test_shape_exceeds_grid():
    with pytest.raises(errors.ShapeExceedsGrid):
        generate(PhantomSpec(ap_semi_axis=4, rl_semi_axis=3, grid=(12, 16, 10)))
    with pytest.raises(errors.ShapeExceedsGrid):
        generate(PhantomSpec(length=20, grid=(40, 40, 10)))


def test_invalid_specs():
    with pytest.raises(ValueError):
        PhantomSpec(ap_semi_axis=0)
    with pytest.raises(ValueError):
        PhantomSpec(kind="torus")
    with pytest.raises(ValueError):
        PhantomSpec(taper_ratio=1.5)


def test_translation_consistent():
    base = PhantomSpec(length=3, grid=(30, 30, 5))
    m0, _, _ = generate(base)
    m1, _, _ = generate(PhantomSpec(length=3, grid=(30, 30, 5), offset=(2, -3)))
    np.testing.assert_array_equal(np.roll(m0.data, (2, -3), axis=(0, 1)), m1.data)


def test_rasterization_error_decreases():
    errs = []
    for dd in (1.0, 0.5, 0.25):
        mask, _, truth = generate(PhantomSpec(length=2, voxel_dims=(dd, dd, 1.0)))
        k = truth.interior[0]
        errs.append(abs(slice_area(mask, k) - truth.area[k]))
    assert errs[0] > errs[1] > errs[2]


# --- perturbation --------------------------------------------------------------

def test_dilate_single_voxel():
    a = np.zeros((5, 5, 5))
    a[2, 2, 2] = 1
    assert perturb(mask_from(a), "dilate", 1).n_voxels == 7


def test_closing_of_box_is_identity():
    mask, _, _ = generate(PhantomSpec(kind="box", ap_semi_axis=2, rl_semi_axis=3, length=4, voxel_dims=(1, 1, 1)))
    closed = perturb(perturb(mask, "dilate", 1), "erode", 1)
    np.testing.assert_array_equal(closed.data, mask.data)


def test_closing_of_cylinder_is_superset():
    mask, _, _ = generate(PhantomSpec(length=4))
    closed = perturb(perturb(mask, "dilate", 1), "erode", 1)
    assert np.all(closed.data >= mask.data)


def test_dilation_area_increase_tracks_perimeter():
    a, b, d = 4.0, 3.0, 0.25
    mask, _, truth = generate(PhantomSpec(ap_semi_axis=a, rl_semi_axis=b, length=4, voxel_dims=(d, d, 1.0)))
    grown = perturb(mask, "dilate", 1)
    for k in truth.interior:
        sl = mask.data[:, :, k] > 0
        # enumeration oracle: background pixels with an in-plane 4-neighbour inside
        added = 0
        for i, j in np.argwhere(~sl):
            if any(0 <= i + di < sl.shape[0] and 0 <= j + dj < sl.shape[1] and sl[i + di, j + dj]
                   for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1))):
                added += 1
        inc = slice_area(grown, k) - slice_area(mask, k)
        assert inc == added * d * d
        assert abs(inc - ellipse_perimeter(a, b) * d) <= 0.2 * ellipse_perimeter(a, b) * d


def test_erosion_to_empty_warns(caplog):
    a = np.zeros((3, 3, 3))
    a[1, 1, 1] = 1
    with caplog.at_level(logging.WARNING, logger="cordmorph.phantom"):
        out = perturb(mask_from(a), "erode", 1)
    assert out.is_empty
    assert "emptied" in caplog.text


def test_perturb_validates_arguments():
    m = mask_from(np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        perturb(m, "dilate", 0)
    with pytest.raises(ValueError):
        perturb(m, "open", 1)
    with pytest.raises(ValueError):
        perturb(m, "dilate", 1, connectivity=26)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dilation_strictly_grows(seed):
    rng = np.random.default_rng(seed)
    a = (rng.random((6, 5, 4)) < rng.uniform(0.05, 0.95)).astype(float)
    m = mask_from(a)
    grown = perturb(m, "dilate", 1)
    if m.n_voxels == a.size or m.n_voxels == 0:
        assert grown.n_voxels == m.n_voxels
    else:
        assert grown.n_voxels > m.n_voxels
    assert np.all(grown.data >= m.data)


def test_jitter_zero_is_identity(rng):
    mask, _, _ = generate(PhantomSpec(length=3))
    assert jitter_boundary(mask, 0.0, rng) is mask


def test_jitter_moves_boundary_by_one_layer():
    mask, _, _ = generate(PhantomSpec(length=3))
    out = jitter_boundary(mask, 0.5, np.random.default_rng(3))
    changed = out.data != mask.data
    assert changed.any()
    grown = perturb(mask, "dilate", 1).data
    shrunk = perturb(mask, "erode", 1).data
    assert np.all((out.data <= grown) & (out.data >= shrunk))


def test_default_level_plan_covers_shape():
    plan = default_level_plan(30)
    assert plan == ((2, (1, 11)), (3, (11, 21)), (4, (21, 31)))


# --- cohorts ---------------------------------------------------------------------

def test_cohort_counts(tmp_path):
    c = make_cohort(tmp_path, n_subjects=5, length=6)
    rows = list(csv.DictReader(c.manifest_path.open()))
    assert len(rows) == 30
    assert tuple(rows[0].keys()) == MANIFEST_COLUMNS
    assert len(list((tmp_path / "v1").glob("*_seg.nii.gz"))) == 30
    assert len({(r["subject_id"], r["contrast"]) for r in rows}) == 30


def test_cohort_deterministic(tmp_path):
    a = make_cohort(tmp_path / "a", n_subjects=3, jitter=0.3, seed=1, length=6)
    b = make_cohort(tmp_path / "b", n_subjects=3, jitter=0.3, seed=1, length=6)
    assert a.manifest_path.read_bytes() == b.manifest_path.read_bytes()
    assert a.digests == b.digests
    for rel, digest in a.digests.items():
        assert hashlib.sha256((tmp_path / "b" / rel).read_bytes()).hexdigest() == digest
    c = make_cohort(tmp_path / "c", n_subjects=3, jitter=0.3, seed=2, length=6)
    assert c.digests != a.digests


def test_zero_jitter_contrasts_identical(tmp_path):
    c = make_cohort(tmp_path, n_subjects=2, jitter=0.0, length=6)
    by_subject = {}
    for subject, _, _, mask_rel, *_ in c.rows:
        by_subject.setdefault(subject, []).append(load(tmp_path / mask_rel).voxels)
    for vols in by_subject.values():
        for v in vols[1:]:
            np.testing.assert_array_equal(v, vols[0])


def test_boundary_shift_shares_anatomy(tmp_path):
    base = make_cohort(tmp_path, n_subjects=2, version_id="v1", length=6)
    grown = make_cohort(tmp_path, n_subjects=2, version_id="v2", boundary_shift=1, length=6)
    for r1, r2 in zip(base.rows, grown.rows):
        m1, m2 = load(tmp_path / r1[3]).voxels, load(tmp_path / r2[3]).voxels
        assert m2.sum() > m1.sum() and np.all(m2 >= m1)
    # labels are shared between versions
    assert base.rows[0][4] == grown.rows[0][4]
