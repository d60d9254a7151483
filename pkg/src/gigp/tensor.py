"""Minimal dense-array reverse-mode autodiff engine.

All values are float64. Gradients are accumulated into ``.grad`` by
``backward``; calling backward twice without zeroing doubles them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:  # optional fast conv kernels; the numpy path is the reference
    import torch as _torch
    import torch.nn.functional as _torch_F
except ImportError:  # pragma: no cover
    _torch = None

_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (teacher forwards, eval)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    """Named learnable tensor; EMA pairing between nets is by name."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        self.tensor.requires_grad = True


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Create an op output; backward_fn(g) returns per-parent grad arrays."""
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to the given (possibly broadcast) shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise ---------------------------------------------------------

def add(a, b):
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * out / b.data, b.data.shape)))


def power(a, p):
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo, hi):
    """Clamp; gradient passes through only where the value is in range."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def _sigmoid_np(x):
    with np.errstate(over="ignore"):  # exp overflow saturates correctly
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a):
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def leaky_relu(a, slope=0.01):
    mask = np.where(a.data > 0.0, 1.0, slope)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a):
    # log(1+exp(x)), overflow-safe
    out = np.logaddexp(0.0, a.data)
    sig = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * sig,))


def softmax(a, axis):
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ValueError(f"softmax axis {axis} invalid for rank {a.data.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), bwd)


_ACTIVATIONS = {
    "sigmoid": lambda t, **kw: sigmoid(t),
    "relu": lambda t, **kw: relu(t),
    "leaky_relu": lambda t, slope=0.01, **kw: leaky_relu(t, slope),
    "tanh": lambda t, **kw: tanh(t),
    "softmax": lambda t, axis=1, **kw: softmax(t, axis),
}


def apply_activation(t, kind, **kwargs):
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation kind: {kind!r}")
    return _ACTIVATIONS[kind](t, **kwargs)


# shape / reduction ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return tsum(a, axis, keepdims) * Tensor(1.0 / float(n))


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        return (gx,)

    return _make(a.data[idx].copy(), (a,), bwd)


def flip(a, axis):
    return _make(np.flip(a.data, axis=axis).copy(), (a,),
                 lambda g: (np.flip(g, axis=axis),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concatenate(tensors, axis):
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate(datas, axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b):
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g))


# convolution ---------------------------------------------------------

def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 ints, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def _corr3d(xp, k, stride):
    """Cross-correlation of padded input xp (B,C,D,H,W) with kernel (O,C,kd,kh,kw)."""
    sd, sh, sw = stride
    win = sliding_window_view(xp, k.shape[2:], axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    out = np.tensordot(win, k, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # (B,Do,Ho,Wo,O)
    return np.moveaxis(out, -1, 1)


def conv3d(x, kernel, bias, stride=1, padding=0):
    """3-D cross-correlation over (batch, channels, D, H, W) input."""
    if x.data.ndim != 5:
        raise ValueError(f"conv3d input must be rank 5, got rank {x.data.ndim}")
    if kernel.data.ndim != 5:
        raise ValueError(f"conv3d kernel must be rank 5, got rank {kernel.data.ndim}")
    if kernel.data.shape[1] != x.data.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.data.shape[1]} channels, "
            f"kernel expects {kernel.data.shape[1]}")
    if bias.data.shape != (kernel.data.shape[0],):
        raise ValueError(f"bias shape {bias.data.shape} != ({kernel.data.shape[0]},)")
    stride = _triple(stride)
    padding = _triple(padding)
    for ax, (ext, kext, s, p) in enumerate(zip(x.data.shape[2:], kernel.data.shape[2:],
                                               stride, padding)):
        if (ext + 2 * p - kext) // s + 1 <= 0:
            raise ValueError(f"non-positive output extent on spatial axis {ax}")

    if _torch is not None:
        xt = _torch.from_numpy(x.data)
        kt = _torch.from_numpy(kernel.data)
        out = _torch_F.conv3d(xt, kt, _torch.from_numpy(bias.data),
                              stride=stride, padding=padding).numpy()

        def bwd(g):
            gt = _torch.from_numpy(np.ascontiguousarray(g))
            gx, gk, gb = _torch.ops.aten.convolution_backward(
                gt, xt, kt, [kt.shape[0]], list(stride), list(padding), [1, 1, 1],
                False, [0, 0, 0], 1, [True, True, True])
            return gx.numpy(), gk.numpy(), gb.numpy()

        return _make(out, (x, kernel, bias), bwd)

    pd, ph, pw = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = _corr3d(xp, kernel.data, stride) + bias.data.reshape(1, -1, 1, 1, 1)

    def bwd(g):
        gb = g.sum(axis=(0, 2, 3, 4))
        sd, sh, sw = stride
        kd, kh, kw = kernel.data.shape[2:]
        # kernel grad: correlate input windows against the output grad
        win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
        gk = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        # input grad: dilate g by the stride, full-correlate with the flipped kernel
        B, O, Do, Ho, Wo = g.shape
        gd = np.zeros((B, O, (Do - 1) * sd + 1, (Ho - 1) * sh + 1, (Wo - 1) * sw + 1))
        gd[:, :, ::sd, ::sh, ::sw] = g
        gd = np.pad(gd, ((0, 0), (0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1),
                         (kw - 1, kw - 1)))
        kf = kernel.data[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1)  # (C,O,kd,kh,kw)
        gxp = _corr3d(gd, kf, (1, 1, 1))
        # gxp covers (Do-1)*s + k extents; pad out to xp if stride left a remainder
        pads = [(0, xs - gs) for xs, gs in zip(xp.shape[2:], gxp.shape[2:])]
        gxp = np.pad(gxp, ((0, 0), (0, 0)) + tuple(pads))
        gx = gxp[:, :, pd:xp.shape[2] - pd or None, ph:xp.shape[3] - ph or None,
                 pw:xp.shape[4] - pw or None]
        return gx, gk, gb

    return _make(out, (x, kernel, bias), bwd)


# trilinear resampling ------------------------------------------------

def _gather_trilinear(vol, xi, yi, zi):
    """Trilinear sample of vol (B,C,D,H,W) at flat index coords xi,yi,zi.

    Coordinates are float voxel indices already clamped to the valid range.
    Returns (values (B,C,n), scatter) where scatter(g) accumulates the
    gradient back into a zero array shaped like vol.
    """
    D, H, W = vol.shape[2:]
    x0 = np.clip(np.floor(xi).astype(np.int64), 0, D - 1)
    y0 = np.clip(np.floor(yi).astype(np.int64), 0, H - 1)
    z0 = np.clip(np.floor(zi).astype(np.int64), 0, W - 1)
    x1 = np.minimum(x0 + 1, D - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    z1 = np.minimum(z0 + 1, W - 1)
    fx, fy, fz = xi - x0, yi - y0, zi - z0
    vf = vol.reshape(vol.shape[0], vol.shape[1], -1)
    corners = []
    for cx, wx in ((x0, 1.0 - fx), (x1, fx)):
        for cy, wy in ((y0, 1.0 - fy), (y1, fy)):
            for cz, wz in ((z0, 1.0 - fz), (z1, fz)):
                corners.append(((cx * H + cy) * W + cz, wx * wy * wz))
    vals = sum(vf[:, :, idx] * w for idx, w in corners)

    def scatter(g):
        B, C, S = vf.shape
        base = (np.arange(B * C) * S)[:, None]
        g2 = g.reshape(B * C, -1)
        gv = np.zeros(B * C * S)
        for idx, w in corners:
            flat = (base + idx[None, :]).ravel()
            gv += np.bincount(flat, weights=(g2 * w).ravel(), minlength=B * C * S)
        return gv.reshape(vol.shape)

    return vals, scatter


def resample_trilinear(x, target_spatial_shape):
    """Resize the spatial extents of a rank-5 tensor, align-corners semantics."""
    if x.data.ndim != 5:
        raise ValueError(f"resample_trilinear input must be rank 5, got {x.data.ndim}")
    tgt = tuple(int(s) for s in target_spatial_shape)
    if len(tgt) != 3 or any(s <= 0 for s in tgt):
        raise ValueError(f"invalid target spatial shape {tgt}")
    src = x.data.shape[2:]

    def axis_coords(t, s):
        if t == 1:
            return np.zeros(1)
        return np.arange(t) * (s - 1) / (t - 1)

    cx, cy, cz = (axis_coords(t, s) for t, s in zip(tgt, src))
    xi, yi, zi = np.meshgrid(cx, cy, cz, indexing="ij")
    vals, scatter = _gather_trilinear(x.data, xi.ravel(), yi.ravel(), zi.ravel())
    out = vals.reshape(x.data.shape[:2] + tgt)
    return _make(out, (x,), lambda g: (scatter(g.reshape(g.shape[:2] + (-1,))),))


# backward / checking -------------------------------------------------

def backward(loss):
    """Populate .grad on every requires_grad node reachable from loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def finite_difference_check(f, point, step=1e-5, num_probes=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    f takes a Tensor and returns a scalar Tensor; point is probed at every
    coordinate (or num_probes random ones).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    loss = f(x)
    backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    if not np.all(np.isfinite(analytic)) or not np.isfinite(loss.data):
        raise FloatingPointError("non-finite values in analytic gradient pass")
    flat = x.data.reshape(-1)
    n = flat.size
    if num_probes is not None and num_probes < n:
        rng = rng or np.random.default_rng(0)
        probes = rng.choice(n, size=num_probes, replace=False)
    else:
        probes = np.arange(n)
    ga = analytic.reshape(-1)
    worst = 0.0
    for i in probes:
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            fp = float(f(Tensor(x.data)).data)
        flat[i] = orig - step
        with no_grad():
            fm = float(f(Tensor(x.data)).data)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError("non-finite values in finite-difference probe")
        num = (fp - fm) / (2.0 * step)
        err = abs(ga[i] - num) / max(1.0, abs(ga[i]), abs(num))
        worst = max(worst, err)
    return worst
