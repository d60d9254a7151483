"""Synthetic phantom volumes, dataset splits, augmentation, and volume IO.

Phantoms are randomized ellipsoids with smooth boundary bumps on a noisy
background, standing in for clinical CT/MR volumes at desk scale. The label
mask comes from the same analytic implicit function as the intensities.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import _gather_trilinear

VOLUME_MAGIC = "GIGPVOL1"


@dataclass
class Volume:
    intensities: np.ndarray          # rank-3 float, indexed [x, y, z]
    spacing: tuple = (1.0, 1.0, 1.0)
    label: np.ndarray | None = None  # rank-3 {0,1}, same shape
    id: str = ""

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.uint8)
            if self.label.shape != self.intensities.shape:
                raise ValueError(
                    f"label shape {self.label.shape} != intensity shape "
                    f"{self.intensities.shape}")

    @property
    def shape(self):
        return self.intensities.shape


@dataclass
class PhantomSpec:
    grid_size: int = 24
    semi_axes_range: tuple = (2.5, 8.0)
    deformation: float = 0.35        # relative bump magnitude on the implicit fn
    contrast: float = 0.4            # foreground/background intensity step
    contrast_jitter: float = 0.3
    noise_floor: float = 0.35        # texture noise std before normalization
    center_jitter: float = 2.0
    margin: int = 2

    def validate(self):
        if self.semi_axes_range[1] + self.center_jitter + self.margin > self.grid_size / 2:
            raise ValueError(
                f"semi-axes up to {self.semi_axes_range[1]} with jitter "
                f"{self.center_jitter} do not fit a {self.grid_size} grid with "
                f"margin {self.margin}")


def normalize_intensities(v):
    """Zero-mean unit-variance intensity normalization."""
    v = np.asarray(v, dtype=np.float64)
    std = v.std()
    if std == 0:
        return v - v.mean()
    return (v - v.mean()) / std


def _smooth_bump_field(shape, rng, n_waves=4):
    """Band-limited random field in [-1, 1], built from a few cosine waves."""
    n = shape[0]
    coords = [np.arange(s) / max(s - 1, 1) for s in shape]
    xs, ys, zs = np.meshgrid(*coords, indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_waves):
        k = rng.uniform(0.5, 2.5, size=3)
        phase = rng.uniform(0, 2 * math.pi, size=3)
        w = rng.normal()
        out += w * np.cos(2 * math.pi * (k[0] * xs + phase[0])) \
                 * np.cos(2 * math.pi * (k[1] * ys + phase[1])) \
                 * np.cos(2 * math.pi * (k[2] * zs + phase[2]))
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def generate_phantom(spec: PhantomSpec, rng, vol_id=""):
    """One labeled phantom: deformed ellipsoid foreground on a noisy background."""
    spec.validate()
    n = spec.grid_size
    axes = rng.uniform(*spec.semi_axes_range, size=3)
    center = (n - 1) / 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter, size=3)
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=float),) * 3, indexing="ij"))
    q = sum(((grid[i] - center[i]) / axes[i]) ** 2 for i in range(3))
    bump = spec.deformation * _smooth_bump_field((n, n, n), rng)
    label = (q + bump <= 1.0).astype(np.uint8)
    contrast = spec.contrast + rng.uniform(-spec.contrast_jitter, spec.contrast_jitter)
    intensities = contrast * label + spec.noise_floor * rng.standard_normal((n, n, n))
    return Volume(normalize_intensities(intensities), (1.0, 1.0, 1.0), label, vol_id)


def ellipsoid_volume(semi_axes):
    a, b, c = semi_axes
    return 4.0 / 3.0 * math.pi * a * b * c


def split_dataset(volume_ids, num_labeled, seed, num_val=8, num_test=12):
    """Deterministic split into labeled/unlabeled train, validation, test id lists."""
    ids = list(volume_ids)
    if num_labeled < 1:
        raise ValueError("num_labeled must be >= 1")
    num_train = len(ids) - num_val - num_test
    if num_train < num_labeled:
        raise ValueError(
            f"need at least {num_labeled + num_val + num_test} volumes, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return {
        "labeled": shuffled[:num_labeled],
        "unlabeled": shuffled[num_labeled:num_train],
        "val": shuffled[num_train:num_train + num_val],
        "test": shuffled[num_train + num_val:],
    }


# augmentation ---------------------------------------------------------

def _zoom_about_center(arr, scale):
    """Rescale content about the grid center on the same grid, border-clamped."""
    shape = arr.shape
    coords = []
    for s in shape:
        c = (s - 1) / 2.0
        coords.append(c + (np.arange(s) - c) / scale)
    xi, yi, zi = np.meshgrid(*coords, indexing="ij")
    xi = np.clip(xi, 0, shape[0] - 1)
    yi = np.clip(yi, 0, shape[1] - 1)
    zi = np.clip(zi, 0, shape[2] - 1)
    vals, _ = _gather_trilinear(arr[None, None].astype(np.float64),
                                xi.ravel(), yi.ravel(), zi.ravel())
    return vals.reshape(shape)


def augment(volume: Volume, rng, crop_size=None, scale_jitter=0.1):
    """Seeded flips, 90-degree rotations, scale jitter, and random crop.

    The identical transform hits intensities and label.
    """
    img = volume.intensities.copy()
    lab = volume.label.astype(np.float64).copy() if volume.label is not None else None

    for ax in range(3):
        if rng.random() < 0.5:
            img = np.flip(img, axis=ax)
            if lab is not None:
                lab = np.flip(lab, axis=ax)
    rot_axes = [(0, 1), (0, 2), (1, 2)][rng.integers(3)]
    k = int(rng.integers(4))
    img = np.rot90(img, k, axes=rot_axes)
    if lab is not None:
        lab = np.rot90(lab, k, axes=rot_axes)

    if scale_jitter > 0:
        scale = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
        img = _zoom_about_center(np.ascontiguousarray(img), scale)
        if lab is not None:
            lab = _zoom_about_center(np.ascontiguousarray(lab), scale)

    if crop_size is not None:
        cs = (crop_size,) * 3 if np.isscalar(crop_size) else tuple(crop_size)
        if any(c > s for c, s in zip(cs, img.shape)):
            raise ValueError(f"crop {cs} exceeds volume shape {img.shape}")
        start = [int(rng.integers(s - c + 1)) for s, c in zip(img.shape, cs)]
        sl = tuple(slice(st, st + c) for st, c in zip(start, cs))
        img = img[sl]
        if lab is not None:
            lab = lab[sl]

    out_label = (lab > 0.5).astype(np.uint8) if lab is not None else None
    return Volume(np.ascontiguousarray(img), volume.spacing, out_label, volume.id)


# IO --------------------------------------------------------------------

def save_volume(volume: Volume, path):
    header = {
        "magic": VOLUME_MAGIC,
        "dims": list(volume.shape),
        "spacing": list(volume.spacing),
        "has_label": volume.label is not None,
        "id": volume.id,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(volume.intensities.astype("<f4").tobytes(order="F"))
        if volume.label is not None:
            fh.write(volume.label.astype(np.uint8).tobytes(order="F"))


def load_volume(path):
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: unreadable volume header: {exc}") from exc
        if header.get("magic") != VOLUME_MAGIC:
            raise ValueError(
                f"{path}: bad magic {header.get('magic')!r}, expected {VOLUME_MAGIC!r}")
        dims = tuple(int(d) for d in header["dims"])
        count = int(np.prod(dims))
        payload = fh.read(count * 4)
        if len(payload) != count * 4:
            raise ValueError(
                f"{path}: intensity payload holds {len(payload) // 4} floats, "
                f"header declares {count}")
        intensities = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
        label = None
        if header["has_label"]:
            lab_payload = fh.read(count)
            if len(lab_payload) != count:
                raise ValueError(
                    f"{path}: label payload holds {len(lab_payload)} bytes, "
                    f"header declares {count}")
            label = np.frombuffer(lab_payload, dtype=np.uint8).reshape(dims, order="F")
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after declared payload")
    return Volume(intensities.astype(np.float64), tuple(header["spacing"]),
                  label, header.get("id", ""))
