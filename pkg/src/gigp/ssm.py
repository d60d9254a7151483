"""Selective state-space scanning and the four-direction interaction block.

Each branch runs an input-dependent diagonal linear recurrence over scalar
token sequences: h_t = Abar_t * h_{t-1} + Bbar_t * x_t, y_t = <C_t, h_t> + D*x_t
with Abar = exp(delta*A), Bbar = delta*B and delta/B/C affine in the token.
The inter-sample direction orders labeled batch members first so state flows
from supervised to unsupervised features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, _make

DIRECTIONS = ("f", "r", "c", "t")


@dataclass
class SsmParams:
    a: Tensor        # (N,) diagonal state matrix, strictly negative
    w_delta: Tensor  # scalar: delta_t = softplus(w_delta * x_t + b_delta)
    b_delta: Tensor
    w_b: Tensor      # (N,): B_t = w_b * x_t + c_b
    c_b: Tensor
    w_c: Tensor      # (N,): C_t = w_c * x_t + c_c
    c_c: Tensor
    d: Tensor        # scalar skip

    def __post_init__(self):
        if np.any(self.a.data >= 0.0):
            raise ValueError("all state-matrix entries must be strictly negative")

    @property
    def state_dim(self):
        return self.a.data.shape[0]


def init_ssm_params(state_dim, rng, prefix, params_out, readout_scale=0.1,
                    d_init=1.0):
    """Fresh branch parameters, registered under prefix into params_out.

    A small readout_scale and d_init start the branch near zero output so a
    residual caller begins close to the identity.
    """
    def reg(name, value):
        t = Tensor(value, requires_grad=True)
        params_out[f"{prefix}.{name}"] = t
        return t

    scale = 0.1
    return SsmParams(
        a=reg("a", -np.arange(1.0, state_dim + 1.0)),
        w_delta=reg("w_delta", scale * rng.standard_normal()),
        b_delta=reg("b_delta", 0.0),
        w_b=reg("w_b", scale * rng.standard_normal(state_dim)),
        c_b=reg("c_b", scale * rng.standard_normal(state_dim)),
        w_c=reg("w_c", readout_scale * rng.standard_normal(state_dim)),
        c_c=reg("c_c", readout_scale * rng.standard_normal(state_dim)),
        d=reg("d", d_init),
    )


def discretize(delta, a, b):
    """Zero-order-hold style discretization: Abar = exp(delta*A), Bbar = delta*B."""
    if np.any(np.asarray(delta if not isinstance(delta, Tensor) else delta.data) <= 0):
        raise ValueError("delta must be positive")
    if not isinstance(delta, Tensor):
        delta = Tensor(delta)
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    return T.exp(delta * a), delta * b


def selective_scan_naive(x, params: SsmParams):
    """Literal per-step recurrence over (M, L) scalar tokens; the oracle path."""
    x = np.asarray(x, dtype=np.float64)
    M, L = x.shape
    N = params.state_dim
    A = params.a.data
    h = np.zeros((M, N))
    y = np.zeros((M, L))
    for t in range(L):
        xt = x[:, t]
        delta = np.logaddexp(0.0, params.w_delta.data * xt + params.b_delta.data)
        abar = np.exp(delta[:, None] * A)
        bt = xt[:, None] * params.w_b.data + params.c_b.data
        ct = xt[:, None] * params.w_c.data + params.c_c.data
        h = abar * h + delta[:, None] * bt * xt[:, None]
        y[:, t] = (ct * h).sum(axis=1) + params.d.data * xt
    return y


def selective_scan(tokens, params: SsmParams):
    """Differentiable selective scan over a (M, L) token batch."""
    x = tokens.data
    if x.ndim != 2:
        raise ValueError(f"expected (num_sequences, length) tokens, got {x.shape}")
    M, L = x.shape
    N = params.state_dim
    A = params.a.data
    pre = params.w_delta.data * x + params.b_delta.data
    delta = np.logaddexp(0.0, pre)                       # (M,L)
    abar = np.exp(delta[:, :, None] * A)                 # (M,L,N)
    bt = x[:, :, None] * params.w_b.data + params.c_b.data
    ct = x[:, :, None] * params.w_c.data + params.c_c.data
    bbar_x = delta[:, :, None] * bt * x[:, :, None]
    hs = np.zeros((L + 1, M, N))
    for t in range(L):
        hs[t + 1] = abar[:, t] * hs[t] + bbar_x[:, t]
    if not np.all(np.isfinite(hs)):
        raise FloatingPointError("non-finite state in selective scan")
    h_seq = np.moveaxis(hs[1:], 0, 1)                    # (M,L,N)
    y = (ct * h_seq).sum(axis=2) + params.d.data * x

    def bwd(gy):
        gx = gy * params.d.data
        gd_skip = float((gy * x).sum())
        gct = gy[:, :, None] * h_seq
        gwc = (gct * x[:, :, None]).sum(axis=(0, 1))
        gcc = gct.sum(axis=(0, 1))
        gx = gx + (gct * params.w_c.data).sum(axis=2)
        gdelta = np.zeros((M, L))
        gA = np.zeros(N)
        gwb = np.zeros(N)
        gcb = np.zeros(N)
        gh = np.zeros((M, N))
        for t in range(L - 1, -1, -1):
            gh = gh + gy[:, t, None] * ct[:, t]
            gabar = gh * hs[t]
            gbbar_x = gh
            gh = gh * abar[:, t]
            gdelta[:, t] += (gabar * abar[:, t] * A).sum(axis=1)
            gA += (gabar * abar[:, t] * delta[:, t, None]).sum(axis=0)
            # bbar_x = delta * bt * x
            gdelta[:, t] += (gbbar_x * bt[:, t] * x[:, t, None]).sum(axis=1)
            gbt = gbbar_x * delta[:, t, None] * x[:, t, None]
            gx[:, t] += (gbbar_x * delta[:, t, None] * bt[:, t]).sum(axis=1)
            gwb += (gbt * x[:, t, None]).sum(axis=0)
            gcb += gbt.sum(axis=0)
            gx[:, t] += (gbt * params.w_b.data).sum(axis=1)
        gpre = gdelta / (1.0 + np.exp(-pre))             # softplus'
        gwd = float((gpre * x).sum())
        gbd = float(gpre.sum())
        gx = gx + gpre * params.w_delta.data
        return (gx, gA, np.float64(gwd), np.float64(gbd), gwb, gcb, gwc, gcc,
                np.float64(gd_skip))

    parents = (tokens, params.a, params.w_delta, params.b_delta, params.w_b,
               params.c_b, params.w_c, params.c_c, params.d)
    return _make(y, parents, bwd)


def make_sequences(feature, direction):
    """Reorder a rank-3 (batch, channels, spatial) tensor into scan sequences.

    Returns (tokens (M, L) Tensor, restore) where restore maps a same-shape
    tensor back to (batch, channels, spatial); restore(make(x)) is bitwise x.
    """
    if feature.data.ndim != 3:
        raise ValueError(f"expected rank-3 feature, got rank {feature.data.ndim}")
    B, C, S = feature.data.shape
    if direction == "f":
        return feature.reshape(B * C, S), lambda t: t.reshape(B, C, S)
    if direction == "r":
        return (T.flip(feature, 2).reshape(B * C, S),
                lambda t: T.flip(t.reshape(B, C, S), 2))
    if direction == "c":
        return (feature.transpose((0, 2, 1)).reshape(B * S, C),
                lambda t: t.reshape(B, S, C).transpose((0, 2, 1)))
    if direction == "t":
        # batch axis as the sequence: labeled samples lead the batch, so state
        # flows labeled -> unlabeled
        return (feature.transpose((1, 2, 0)).reshape(C * S, B),
                lambda t: t.reshape(C, S, B).transpose((2, 0, 1)))
    raise ValueError(f"unknown scan direction {direction!r}")


def iim_forward(feature, branch_params, lambda1, lambda2):
    """Four-direction scan mix: f + r + lambda1*c + lambda2*t."""
    weights = {"f": 1.0, "r": 1.0, "c": float(lambda1), "t": float(lambda2)}
    out = None
    for d in DIRECTIONS:
        if weights[d] == 0.0:
            continue
        seq, restore = make_sequences(feature, d)
        branch = restore(selective_scan(seq, branch_params[d]))
        if weights[d] != 1.0:
            branch = branch * Tensor(weights[d])
        out = branch if out is None else out + branch
    return out if out is not None else feature * Tensor(0.0)


def gsc(feature, main_kernel, main_bias, gate_kernel, gate_bias):
    """Gated spatial convolution: x + conv3(x) * sigmoid(conv1(x))."""
    main = T.conv3d(feature, main_kernel, main_bias, padding=1)
    gate = T.sigmoid(T.conv3d(feature, gate_kernel, gate_bias))
    return feature + main * gate


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize over the channel axis of (batch, channels, spatial)."""
    m = x.mean(axis=1, keepdims=True)
    centered = x - m
    var = (centered * centered).mean(axis=1, keepdims=True)
    normed = centered * (var + Tensor(eps)) ** -0.5
    C = x.data.shape[1]
    return normed * gain.reshape(1, C, 1) + bias.reshape(1, C, 1)


@dataclass
class GiimParams:
    gsc_main_kernel: Tensor
    gsc_main_bias: Tensor
    gsc_gate_kernel: Tensor
    gsc_gate_bias: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor   # (C, C)
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    branches: dict   # direction -> SsmParams


def init_giim_params(channels, state_dim, rng, prefix, params_out):
    def reg(name, value):
        t = Tensor(value, requires_grad=True)
        params_out[f"{prefix}.{name}"] = t
        return t

    C = channels
    he3 = 0.03 * np.sqrt(2.0 / (C * 27))  # damped: the block starts near identity
    branches = {d: init_ssm_params(state_dim, rng, f"{prefix}.ssm_{d}", params_out,
                                   readout_scale=0.002, d_init=0.0)
                for d in DIRECTIONS}
    return GiimParams(
        gsc_main_kernel=reg("gsc_main_kernel", he3 * rng.standard_normal((C, C, 3, 3, 3))),
        gsc_main_bias=reg("gsc_main_bias", np.zeros(C)),
        gsc_gate_kernel=reg("gsc_gate_kernel",
                            np.sqrt(2.0 / C) * rng.standard_normal((C, C, 1, 1, 1))),
        gsc_gate_bias=reg("gsc_gate_bias", np.zeros(C)),
        ln1_gain=reg("ln1_gain", np.ones(C)),
        ln1_bias=reg("ln1_bias", np.zeros(C)),
        ln2_gain=reg("ln2_gain", np.ones(C)),
        ln2_bias=reg("ln2_bias", np.zeros(C)),
        mlp_w1=reg("mlp_w1", np.sqrt(2.0 / C) * rng.standard_normal((C, C))),
        mlp_b1=reg("mlp_b1", np.zeros(C)),
        mlp_w2=reg("mlp_w2", np.zeros((C, C))),  # residual MLP starts at identity
        mlp_b2=reg("mlp_b2", np.zeros(C)),
        branches=branches,
    )


def giim_block(feature, params: GiimParams, lambda1, lambda2, enabled=True):
    """GSC -> LayerNorm -> four-direction scan -> LayerNorm -> MLP, residual.

    Output shape equals input shape. With enabled=False the block is the
    identity map (ablation toggle).
    """
    if not enabled:
        return feature
    B, C = feature.data.shape[:2]
    spatial = feature.data.shape[2:]
    S = int(np.prod(spatial))
    h = gsc(feature, params.gsc_main_kernel, params.gsc_main_bias,
            params.gsc_gate_kernel, params.gsc_gate_bias)
    h = h.reshape(B, C, S)
    h = h + iim_forward(layer_norm(h, params.ln1_gain, params.ln1_bias),
                        params.branches, lambda1, lambda2)
    n = layer_norm(h, params.ln2_gain, params.ln2_bias)
    # token-wise two-layer MLP over the channel axis
    tok = n.transpose((0, 2, 1)).reshape(B * S, C)
    hidden = T.leaky_relu(T.matmul(tok, params.mlp_w1) + params.mlp_b1, 0.01)
    mlp = T.matmul(hidden, params.mlp_w2) + params.mlp_b2
    h = h + mlp.reshape(B, S, C).transpose((0, 2, 1))
    return h.reshape((B, C) + spatial)
