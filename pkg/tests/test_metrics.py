import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gigp.metrics import (EmptyMaskError, asd, boundary_voxels, dice,
                          evaluate_pair, hd95, jaccard)


def _ball(n, center, r):
    idx = np.indices((n, n, n))
    return ((idx - np.asarray(center)[:, None, None, None]) ** 2).sum(0) <= r * r


def test_dice_known_values():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[:2] = True          # 32 voxels
    b[1:3] = True         # 32 voxels, overlap 16
    assert dice(a, b) == pytest.approx(0.5)
    assert jaccard(a, b) == pytest.approx(1.0 / 3.0)


def test_identical_masks():
    m = _ball(10, (5, 5, 5), 3)
    assert dice(m, m) == 1.0
    assert jaccard(m, m) == 1.0
    assert hd95(m, m) == 0.0
    assert asd(m, m) == 0.0


def test_empty_masks():
    e = np.zeros((5, 5, 5), bool)
    assert dice(e, e) == 1.0
    assert jaccard(e, e) == 1.0
    with pytest.raises(EmptyMaskError):
        hd95(e, _ball(5, (2, 2, 2), 1))
    with pytest.raises(EmptyMaskError):
        asd(_ball(5, (2, 2, 2), 1), e)


def test_disjoint_masks():
    a = np.zeros((6, 6, 6), bool)
    b = np.zeros((6, 6, 6), bool)
    a[0, 0, 0] = True
    b[5, 0, 0] = True
    assert dice(a, b) == 0.0
    assert jaccard(a, b) == 0.0
    assert hd95(a, b) == pytest.approx(5.0)
    assert asd(a, b) == pytest.approx(5.0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2, 2), bool), np.zeros((3, 3, 3), bool))


def test_boundary_of_solid_cube():
    m = np.zeros((6, 6, 6), bool)
    m[1:5, 1:5, 1:5] = True
    pts = boundary_voxels(m)
    # 4^3 cube minus its 2^3 interior
    assert len(pts) == 64 - 8
    assert not any((p == [2, 2, 2]).all() for p in pts)


def test_edge_voxels_are_boundary():
    m = np.ones((3, 3, 3), bool)
    assert len(boundary_voxels(m)) == 26  # all but the center


def test_spacing_scales_distances():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[2, 2, 2] = True
    b[2, 2, 5] = True
    assert hd95(a, b, spacing=(1, 1, 2)) == pytest.approx(6.0)
    assert asd(a, b, spacing=(1, 1, 2)) == pytest.approx(6.0)


def _brute_directed(a_pts, b_pts):
    d = np.linalg.norm(a_pts[:, None, :] - b_pts[None, :, :], axis=2)
    return d.min(axis=1)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_distance_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 8
    a = _ball(n, rng.integers(2, 6, 3), rng.uniform(1.0, 2.5))
    b = _ball(n, rng.integers(2, 6, 3), rng.uniform(1.0, 2.5))
    pa = boundary_voxels(a).astype(float)
    pb = boundary_voxels(b).astype(float)
    dab = np.sort(_brute_directed(pa, pb))
    dba = np.sort(_brute_directed(pb, pa))
    ref95 = max(dab[max(int(np.ceil(0.95 * len(dab))) - 1, 0)],
                dba[max(int(np.ceil(0.95 * len(dba))) - 1, 0)])
    ref_asd = np.concatenate([dab, dba]).mean()
    assert hd95(a, b) == pytest.approx(ref95, abs=1e-12)
    assert asd(a, b) == pytest.approx(ref_asd, abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_jaccard_dice_identity(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((6, 6, 6)) > 0.5
    b = rng.random((6, 6, 6)) > 0.5
    d, j = dice(a, b), jaccard(a, b)
    assert j == pytest.approx(d / (2.0 - d))
    assert 0.0 <= j <= d <= 1.0


def test_translation_invariance():
    a = _ball(12, (4, 5, 6), 2.5)
    b = _ball(12, (5, 5, 6), 2.5)
    a2 = np.roll(a, (2, 1, 0), axis=(0, 1, 2))
    b2 = np.roll(b, (2, 1, 0), axis=(0, 1, 2))
    assert hd95(a, b) == pytest.approx(hd95(a2, b2))
    assert asd(a, b) == pytest.approx(asd(a2, b2))
    assert dice(a, b) == pytest.approx(dice(a2, b2))


def test_evaluate_pair_missing_distances():
    m = _ball(6, (3, 3, 3), 2)
    out = evaluate_pair(np.zeros((6, 6, 6), bool), m)
    assert out["dice"] == 0.0 and out["jaccard"] == 0.0
    assert out["hd95"] is None and out["asd"] is None
    full = evaluate_pair(m, m)
    assert full == {"dice": 1.0, "jaccard": 1.0, "hd95": 0.0, "asd": 0.0}
