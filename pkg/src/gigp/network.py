"""Compact 3-D encoder-decoder with moment attention per encoder level and
the four-direction scan block at the bottleneck.

Parameters live in a flat name -> Tensor dict so student/teacher pairing and
EMA updates are by name. Structured views over the dict are rebuilt per
forward pass; they alias the same Tensor objects.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .moments import MomentAttentionParams, mvma_attention
from .ssm import GiimParams, SsmParams, giim_block, init_giim_params

CHECKPOINT_MAGIC = b"GIGPCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    depth: int = 3                 # encoder resolution levels K
    base_channels: int = 4
    growth: int = 2
    num_classes: int = 2
    input_shape: tuple = (24, 24, 24)
    ssm_state_dim: int = 4
    leaky_slope: float = 0.01

    def channels(self, level):
        return self.base_channels * self.growth ** level

    def validate(self):
        div = 2 ** (self.depth - 1)
        for ext in self.input_shape:
            if ext % div != 0:
                raise ValueError(
                    f"spatial extent {ext} not divisible by 2^(K-1) = {div}")


@dataclass
class ForwardOutputs:
    prob: Tensor                  # (B, classes, D, H, W), softmax over classes
    encoder_features: list        # K tensors, level k at input/2^k
    decoder_features: list        # K tensors, mirrored extents


def build_network(config: NetConfig, seed):
    """Deterministic He-style initialization; returns flat name -> Tensor dict."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}

    def reg(name, value):
        t = Tensor(value, requires_grad=True)
        params[name] = t
        return t

    def conv_init(name, cout, cin, k, scale=1.0):
        fan_in = cin * k ** 3
        reg(f"{name}.kernel",
            scale * np.sqrt(2.0 / fan_in) * rng.standard_normal((cout, cin, k, k, k)))
        reg(f"{name}.bias", np.zeros(cout))

    def norm_init(name, c):
        reg(f"{name}.gain", np.ones(c))
        reg(f"{name}.bias", np.zeros(c))

    K = config.depth
    for k in range(K):
        cin = 1 if k == 0 else config.channels(k)
        c = config.channels(k)
        conv_init(f"enc{k}.conv0", c, cin, 3)
        norm_init(f"enc{k}.norm0", c)
        conv_init(f"enc{k}.conv1", c, c, 3)
        norm_init(f"enc{k}.norm1", c)
        for ax in ("h", "w", "l"):
            # damped so early gates sit near the flat sigmoid(0) = 0.5
            conv_init(f"enc{k}.mvma.{ax}", c, 6 * c, 1, scale=0.1)
        reg(f"enc{k}.mvma.lambda_p", 0.0)  # residual attention starts as identity
        if k < K - 1:
            conv_init(f"down{k}", config.channels(k + 1), c, 2)

    init_giim_params(config.channels(K - 1), config.ssm_state_dim, rng,
                     "giim", params)

    for k in range(K - 2, -1, -1):
        c = config.channels(k)
        conv_init(f"up{k}", c, config.channels(k + 1), 1)
        conv_init(f"dec{k}.conv0", c, 2 * c, 3)
        norm_init(f"dec{k}.norm0", c)
        conv_init(f"dec{k}.conv1", c, c, 3)
        norm_init(f"dec{k}.norm1", c)

    conv_init("head", config.num_classes, config.base_channels, 1)

    # per-level single-channel collapse used by the moment consistency loss
    for k in range(K):
        c = config.channels(k)
        reg(f"collapse.enc{k}.weights", np.full(c, 1.0 / c))
        reg(f"collapse.enc{k}.bias", np.zeros(1))
        reg(f"collapse.dec{k}.weights", np.full(c, 1.0 / c))
        reg(f"collapse.dec{k}.bias", np.zeros(1))
    return params


def _ssm_from_dict(prefix, params):
    return SsmParams(**{f: params[f"{prefix}.{f}"] for f in
                        ("a", "w_delta", "b_delta", "w_b", "c_b", "w_c", "c_c", "d")})


def _giim_from_dict(params):
    fields = ("gsc_main_kernel", "gsc_main_bias", "gsc_gate_kernel", "gsc_gate_bias",
              "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
              "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")
    return GiimParams(**{f: params[f"giim.{f}"] for f in fields},
                      branches={d: _ssm_from_dict(f"giim.ssm_{d}", params)
                                for d in ("f", "r", "c", "t")})


def _instance_norm(x, gain, bias, eps=1e-6):
    m = x.mean(axis=(2, 3, 4), keepdims=True)
    centered = x - m
    var = (centered * centered).mean(axis=(2, 3, 4), keepdims=True)
    C = x.data.shape[1]
    return centered * (var + Tensor(eps)) ** -0.5 \
        * gain.reshape(1, C, 1, 1, 1) + bias.reshape(1, C, 1, 1, 1)


def forward(volume_batch, params, config: NetConfig, *, enable_gmam=True,
            enable_giim=True, lambda1=0.5, lambda2=0.5):
    """Full forward pass emitting probabilities and per-level features.

    Teacher passes wrap this in tensor.no_grad(); the architecture is shared.
    """
    x = volume_batch if isinstance(volume_batch, Tensor) else Tensor(volume_batch)
    if x.data.ndim != 5 or x.data.shape[2:] != tuple(config.input_shape):
        raise ValueError(
            f"input shape {x.data.shape} does not match configured spatial "
            f"shape {config.input_shape}")
    slope = config.leaky_slope
    K = config.depth

    def conv_block(h, name):
        h = T.conv3d(h, params[f"{name}.conv0.kernel"], params[f"{name}.conv0.bias"],
                     padding=1)
        h = T.leaky_relu(_instance_norm(h, params[f"{name}.norm0.gain"],
                                        params[f"{name}.norm0.bias"]), slope)
        h = T.conv3d(h, params[f"{name}.conv1.kernel"], params[f"{name}.conv1.bias"],
                     padding=1)
        return T.leaky_relu(_instance_norm(h, params[f"{name}.norm1.gain"],
                                           params[f"{name}.norm1.bias"]), slope)

    enc_feats = []
    h = x
    for k in range(K):
        h = conv_block(h, f"enc{k}")
        if enable_gmam:
            mv = MomentAttentionParams(
                kernels={ax: params[f"enc{k}.mvma.{ax}.kernel"] for ax in "hwl"},
                biases={ax: params[f"enc{k}.mvma.{ax}.bias"] for ax in "hwl"},
                lambda_p=params[f"enc{k}.mvma.lambda_p"])
            h = mvma_attention(h, mv)
        enc_feats.append(h)
        if k < K - 1:
            h = T.conv3d(h, params[f"down{k}.kernel"], params[f"down{k}.bias"],
                         stride=2)

    h = giim_block(enc_feats[-1], _giim_from_dict(params), lambda1, lambda2,
                   enabled=enable_giim)

    dec_feats = [None] * K
    dec_feats[K - 1] = h
    for k in range(K - 2, -1, -1):
        target = tuple(e // 2 ** k for e in config.input_shape)
        up = T.resample_trilinear(h, target)
        up = T.conv3d(up, params[f"up{k}.kernel"], params[f"up{k}.bias"])
        h = conv_block(T.concatenate([up, enc_feats[k]], axis=1), f"dec{k}")
        dec_feats[k] = h

    logits = T.conv3d(h, params["head.kernel"], params["head.bias"])
    return ForwardOutputs(T.softmax(logits, axis=1), enc_feats, dec_feats)


# checkpoint IO ---------------------------------------------------------

def save_checkpoint(path, params, config: NetConfig, iteration):
    names = sorted(params)
    manifest = [[n, list(params[n].data.shape)] for n in names]
    header = {
        "version": CHECKPOINT_VERSION,
        "config": {**asdict(config), "input_shape": list(config.input_shape)},
        "iteration": int(iteration),
        "params": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for n in names:
            fh.write(params[n].data.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(
                f"{path}: bad checkpoint magic {magic!r}, expected "
                f"{CHECKPOINT_MAGIC!r}")
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: unreadable checkpoint header: {exc}") from exc
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint version {header.get('version')}")
        cfg = dict(header["config"])
        cfg["input_shape"] = tuple(cfg["input_shape"])
        config = NetConfig(**cfg)
        params = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 8)
            if len(payload) != count * 8:
                raise ValueError(f"{path}: truncated blob for parameter {name}")
            arr = np.frombuffer(payload, dtype="<f8").reshape(shape)
            params[name] = Tensor(arr.copy(), requires_grad=True)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after declared blobs")
    return params, config, int(header["iteration"])
