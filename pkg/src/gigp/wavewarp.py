"""Sine-wave coordinate perturbation and trilinear grid resampling.

A shared deformation grid displaces every axis coordinate by A*sin(2*pi*f*c)
in normalized [-1, 1] space. The injectivity bound 2*pi*f*A < 1 keeps the
per-axis map strictly increasing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _gather_trilinear, _make


@dataclass
class WaveParams:
    amplitude: float = 0.05
    frequency: float = 2.0

    def validate(self):
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.frequency <= 0:
            raise ValueError(f"frequency must be > 0, got {self.frequency}")
        if 2.0 * math.pi * self.frequency * self.amplitude >= 1.0:
            raise ValueError(
                f"wave warp not injective: 2*pi*f*A = "
                f"{2.0 * math.pi * self.frequency * self.amplitude:.4f} >= 1 "
                f"(A={self.amplitude}, f={self.frequency})")


def build_wave_grid(spatial_shape, params: WaveParams):
    """Deformation grid [D,H,W,3] of warped normalized coordinates."""
    params.validate()
    shape = tuple(int(s) for s in spatial_shape)
    if len(shape) != 3 or any(s < 2 for s in shape):
        raise ValueError(f"spatial shape must be 3 extents >= 2, got {shape}")
    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    warped = [c + params.amplitude * np.sin(2.0 * math.pi * params.frequency * c)
              for c in axes]
    xi, yi, zi = np.meshgrid(*warped, indexing="ij")
    return np.stack([xi, yi, zi], axis=-1)


def identity_grid(spatial_shape):
    return build_wave_grid(spatial_shape, WaveParams(amplitude=0.0, frequency=1.0))


def grid_sample_trilinear(volume, grid):
    """Sample a rank-5 tensor at the grid's normalized coordinates.

    Align-corners convention; out-of-range coordinates clamp to the border.
    Differentiable w.r.t. the volume; the grid is a constant.
    """
    vol = volume if isinstance(volume, Tensor) else Tensor(volume)
    if vol.data.ndim != 5:
        raise ValueError(f"volume must be rank 5, got rank {vol.data.ndim}")
    if grid.shape[:3] != vol.data.shape[2:] or grid.shape[-1] != 3:
        raise ValueError(
            f"grid spatial shape {grid.shape[:3]} does not match volume "
            f"spatial shape {vol.data.shape[2:]}")
    D, H, W = vol.data.shape[2:]
    # normalized [-1,1] -> voxel indices, clamped to the border
    xi = np.clip((grid[..., 0].ravel() + 1.0) * 0.5 * (D - 1), 0, D - 1)
    yi = np.clip((grid[..., 1].ravel() + 1.0) * 0.5 * (H - 1), 0, H - 1)
    zi = np.clip((grid[..., 2].ravel() + 1.0) * 0.5 * (W - 1), 0, W - 1)
    vals, scatter = _gather_trilinear(vol.data, xi, yi, zi)
    out = vals.reshape(vol.data.shape)
    return _make(out, (vol,), lambda g: (scatter(g.reshape(g.shape[:2] + (-1,))),))


def apply_ggpc(volumes, params: WaveParams):
    """Warp a batch (rank-5 ndarray) of unlabeled samples through one shared grid."""
    arr = np.asarray(volumes, dtype=np.float64)
    if arr.ndim != 5:
        raise ValueError(f"expected rank-5 batch, got rank {arr.ndim}")
    if params.amplitude == 0.0:
        return arr.copy()
    grid = build_wave_grid(arr.shape[2:], params)
    return grid_sample_trilinear(Tensor(arr), grid).data
