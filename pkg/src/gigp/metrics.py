"""Segmentation evaluation metrics: Dice, Jaccard, 95% Hausdorff, ASD.

Distance metrics work on 6-connectivity boundary voxels in physical units
(voxel index * spacing). Empty masks make the distance metrics undefined;
callers report them as missing rather than zero.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class EmptyMaskError(ValueError):
    """Raised when a surface-distance metric is requested on an empty mask."""


def _check_pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b):
    a, b = _check_pair(a, b)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def jaccard(a, b):
    a, b = _check_pair(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return np.logical_and(a, b).sum() / union


def boundary_voxels(mask):
    """Indices (n,3) of foreground voxels with a background 6-neighbor.

    Out-of-bounds counts as background, so voxels on the array edge are
    boundary.
    """
    mask = np.asarray(mask, dtype=bool)
    interior = np.ones_like(mask)
    for ax in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(None, -1)
        hi[ax] = slice(1, None)
        nb_fwd = np.zeros_like(mask)
        nb_fwd[tuple(lo)] = mask[tuple(hi)]
        nb_bwd = np.zeros_like(mask)
        nb_bwd[tuple(hi)] = mask[tuple(lo)]
        interior &= nb_fwd & nb_bwd
    return np.argwhere(mask & ~interior)


def _surface_points(mask, spacing):
    pts = boundary_voxels(mask)
    if len(pts) == 0:
        raise EmptyMaskError("mask has no foreground voxels")
    return pts * np.asarray(spacing, dtype=float)


def _directed_distances(src_pts, dst_pts):
    tree = cKDTree(dst_pts)
    d, _ = tree.query(src_pts)
    return np.asarray(d, dtype=float)


def _percentile_nearest_rank(values, pct):
    v = np.sort(values)
    rank = int(np.ceil(pct / 100.0 * len(v)))
    return v[max(rank - 1, 0)]


def hd95(a, b, spacing=(1.0, 1.0, 1.0)):
    """Max over both directions of the 95th-percentile surface distance."""
    a, b = _check_pair(a, b)
    pa = _surface_points(a, spacing)
    pb = _surface_points(b, spacing)
    dab = _directed_distances(pa, pb)
    dba = _directed_distances(pb, pa)
    return max(_percentile_nearest_rank(dab, 95.0),
               _percentile_nearest_rank(dba, 95.0))


def asd(a, b, spacing=(1.0, 1.0, 1.0)):
    """Mean of the pooled directed surface distances (symmetric)."""
    a, b = _check_pair(a, b)
    pa = _surface_points(a, spacing)
    pb = _surface_points(b, spacing)
    pooled = np.concatenate([_directed_distances(pa, pb),
                             _directed_distances(pb, pa)])
    return float(pooled.mean())


def evaluate_pair(pred, label, spacing=(1.0, 1.0, 1.0)):
    """All four metrics; distance metrics are None when either mask is empty."""
    out = {"dice": float(dice(pred, label)), "jaccard": float(jaccard(pred, label))}
    try:
        out["hd95"] = float(hd95(pred, label, spacing))
        out["asd"] = float(asd(pred, label, spacing))
    except EmptyMaskError:
        out["hd95"] = None
        out["asd"] = None
    return out
