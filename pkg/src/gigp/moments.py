"""Second-order geometric moments: directional moment maps, the multi-view
moment attention gate, normalized moment descriptors, and the multi-scale
moment consistency loss.

Centroid convention: the geometric grid center ((H-1)/2, (W-1)/2, (L-1)/2)
in voxel index units, so the per-axis RMS deviation is a constant of the
grid size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# the six admissible (p, q, r) with p+q+r = 2
MOMENT_TRIPLES = ((2, 0, 0), (0, 2, 0), (0, 0, 2), (1, 1, 0), (1, 0, 1), (0, 1, 1))

_AXES = {"h": 0, "w": 1, "l": 2}


class DegenerateFieldError(ValueError):
    """Field mass is ~0; moment losses must be skipped for this sample."""


def _offsets(spatial_shape):
    """Centered index offsets per spatial axis."""
    return [np.arange(s, dtype=np.float64) - (s - 1) / 2.0 for s in spatial_shape]


def _monomial(spatial_shape, pqr, scales=None):
    """Constant weight field (x-x0)^p (y-y0)^q (z-z0)^r over the grid."""
    offs = _offsets(spatial_shape)
    if scales is not None:
        offs = [o / s for o, s in zip(offs, scales)]
    p, q, r = pqr
    w = (offs[0][:, None, None] ** p) * (offs[1][None, :, None] ** q) \
        * (offs[2][None, None, :] ** r)
    return w[None, None]  # broadcast over batch and channel


def directional_moments(feature, axis):
    """Per-triple moment maps with the given spatial axis summed out.

    feature: rank-5 Tensor [B, C, H, W, L]; axis in {'h','w','l'}.
    Returns dict triple -> Tensor with the reduced axis extent 1.
    """
    if axis not in _AXES:
        raise ValueError(f"invalid moment axis {axis!r}, expected one of h/w/l")
    if feature.data.ndim != 5:
        raise ValueError(f"feature must be rank 5, got rank {feature.data.ndim}")
    ax = _AXES[axis] + 2
    spatial = feature.data.shape[2:]
    return {pqr: (feature * Tensor(_monomial(spatial, pqr))).sum(axis=ax, keepdims=True)
            for pqr in MOMENT_TRIPLES}


@dataclass
class MomentAttentionParams:
    kernels: dict       # axis -> Tensor (C, 6*C, 1, 1, 1)
    biases: dict        # axis -> Tensor (C,)
    lambda_p: Tensor    # learnable scalar, residual attention strength


def mvma_attention(feature, params: MomentAttentionParams):
    """Residual moment-gated attention: P + lambda * P * prod_axes sigmoid(conv(mu))."""
    C = feature.data.shape[1]
    gate = None
    for axis in ("h", "w", "l"):
        mu = directional_moments(feature, axis)
        stacked = T.concatenate([mu[pqr] for pqr in MOMENT_TRIPLES], axis=1)
        kern = params.kernels[axis]
        if kern.data.shape[1] != 6 * C:
            raise ValueError(
                f"axis {axis} conv expects {kern.data.shape[1]} channels, "
                f"moment stack has {6 * C}")
        factor = T.sigmoid(T.conv3d(stacked, kern, params.biases[axis]))
        gate = factor if gate is None else gate * factor
    return feature + params.lambda_p * feature * gate


def channel_collapse(feature, weights, bias):
    """1x1x1 convolution of a [1,C,D,H,W] feature down to a single channel."""
    C = feature.data.shape[1]
    if weights.data.shape != (C,):
        raise ValueError(f"collapse weights shape {weights.data.shape} != ({C},)")
    kernel = weights.reshape(1, C, 1, 1, 1)
    return T.conv3d(feature, kernel, bias.reshape(1))


@dataclass
class MomentVector:
    values: dict   # triple -> scalar Tensor
    mass: Tensor

    def as_array(self):
        return np.array([float(self.values[t].data) for t in MOMENT_TRIPLES])


def normalized_moments(field, eps=1e-12):
    """Six unit-mass, RMS-standardized second-order moments of a 1-channel field.

    Raises DegenerateFieldError when the absolute mass is ~0; callers skip
    the moment loss for that sample.
    """
    if field.data.ndim != 5 or field.data.shape[1] != 1:
        raise ValueError(
            f"normalized_moments expects [B,1,D,H,W], got {field.data.shape}")
    spatial = field.data.shape[2:]
    # sigma per axis = sqrt(mean squared centered index) -- a grid constant.
    # Scaling divides after the raw sum so symmetric cancellations stay exact.
    variances = [np.mean(o ** 2) for o in _offsets(spatial)]
    mass = T.absolute(field).sum()
    if float(mass.data) <= eps:
        raise DegenerateFieldError(f"field mass {float(mass.data)} <= {eps}")
    values = {}
    for pqr in MOMENT_TRIPLES:
        scale = float(np.prod([v ** (e / 2.0) for v, e in zip(variances, pqr)]))
        raw = (field * Tensor(_monomial(spatial, pqr))).sum()
        values[pqr] = raw / mass / Tensor(scale)
    return MomentVector(values, mass)


def _vector_l1(a: MomentVector, b: MomentVector):
    terms = [T.absolute(a.values[t] - b.values[t]) for t in MOMENT_TRIPLES]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def msgc_loss(student_layers, teacher_ns, teacher_gp, alpha, beta):
    """Multi-scale moment consistency.

    student_layers: K pairs (encoder MomentVector, decoder MomentVector);
    teacher_ns / teacher_gp: one (encoder, decoder) pair each, the teacher's
    final-layer moments. L1 over the six triples, weighted per level.
    """
    K = len(student_layers)
    if len(alpha) != K or len(beta) != K:
        raise ValueError(
            f"weight lengths ({len(alpha)}, {len(beta)}) != layer count {K}")
    total = Tensor(0.0)
    for k, (enc_s, dec_s) in enumerate(student_layers):
        for s_vec, ns_vec, gp_vec in ((enc_s, teacher_ns[0], teacher_gp[0]),
                                      (dec_s, teacher_ns[1], teacher_gp[1])):
            total = total + Tensor(float(alpha[k])) * _vector_l1(s_vec, ns_vec)
            total = total + Tensor(float(beta[k])) * _vector_l1(s_vec, gp_vec)
    return total
