"""Invariant, oracle, and gradient self-check suite.

Every property is one named check; `run_checks` prints one line per check
and reports failures with the witnessing values. Exit status 0 iff green.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor, finite_difference_check
from . import metrics as M
from .moments import (MOMENT_TRIPLES, DegenerateFieldError, MomentAttentionParams,
                      channel_collapse, directional_moments, msgc_loss,
                      mvma_attention, normalized_moments)
from .ssm import (DIRECTIONS, init_ssm_params, make_sequences, selective_scan,
                  selective_scan_naive, init_giim_params, giim_block)
from .wavewarp import WaveParams, build_wave_grid, identity_grid, grid_sample_trilinear
from .data import (PhantomSpec, Volume, augment, generate_phantom,
                   normalize_intensities, _smooth_bump_field)
from .network import NetConfig, build_network, forward
from .trainer import (TrainConfig, TrainerState, clone_params, consistency_loss,
                      supervised_loss, train_step)


class CheckFailure(AssertionError):
    pass


def _fail(msg):
    raise CheckFailure(msg)


def _require(cond, msg):
    if not cond:
        _fail(msg)


# --- tensor engine ------------------------------------------------------

def check_grad_conv3d():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 2, 5, 5, 5)))
    k = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    kt, bt = Tensor(k.data, True), Tensor(b.data, True)
    e1 = finite_difference_check(
        lambda p: T.conv3d(p, kt, bt, stride=2, padding=1).sum(), x,
        num_probes=40, rng=rng)
    xt = Tensor(x.data, True)
    e2 = finite_difference_check(
        lambda p: T.conv3d(xt, p, bt, stride=2, padding=1).sum(), k,
        num_probes=40, rng=rng)
    worst = max(e1, e2)
    _require(worst < 1e-4, f"conv3d gradient rel error {worst}")
    return f"rel err {worst:.2e}"


def check_grad_resample():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 2, 6, 6, 6)))
    w = Tensor(rng.standard_normal((1, 2, 4, 5, 9)))
    err = finite_difference_check(
        lambda p: (T.resample_trilinear(p, (4, 5, 9)) * w).sum(),
        x, num_probes=60, rng=rng)
    _require(err < 1e-4, f"resample gradient rel error {err}")
    return f"rel err {err:.2e}"


def check_grad_activations():
    rng = np.random.default_rng(2)
    x = Tensor(0.5 * rng.standard_normal(40))
    wsm = Tensor(rng.standard_normal((8, 5)))
    worst = {}
    for kind, f in [("sigmoid", T.sigmoid), ("tanh", T.tanh),
                    ("softplus", T.softplus),
                    ("leaky_relu", lambda t: T.leaky_relu(t, 0.01)),
                    ("softmax", lambda t: T.softmax(t.reshape(8, 5), 1) * wsm)]:
        w = Tensor(rng.standard_normal(40).reshape(-1))
        err = finite_difference_check(
            lambda t, f=f, kind=kind: (f(t) * w).sum() if kind != "softmax"
            else f(t).sum(), x)
        worst[kind] = err
    bad = {k: v for k, v in worst.items() if v >= 1e-7}
    _require(not bad, f"smooth activation gradients too loose: {bad}")
    return "max rel err %.2e" % max(worst.values())


def check_backward_twice_doubles():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal(10), requires_grad=True)
    loss = (T.sigmoid(x) * x).sum()
    T.backward(loss)
    g1 = x.grad.copy()
    T.backward(loss)
    _require(np.array_equal(x.grad, 2.0 * g1),
             "grad accumulation is not exactly twofold")
    return "exact"


def check_forward_determinism():
    rng = np.random.default_rng(4)
    cfg = NetConfig(depth=2, base_channels=4, input_shape=(8, 8, 8))
    params = build_network(cfg, seed=5)
    x = rng.standard_normal((2, 1, 8, 8, 8))
    a = forward(x, params, cfg).prob.data
    b = forward(x, params, cfg).prob.data
    _require(np.array_equal(a, b), "repeated forward passes differ")
    return "bitwise"


# --- moments ------------------------------------------------------------

def check_moment_flip_symmetry():
    # integer field on an odd grid: all products are exact, so symmetry is too
    rng = np.random.default_rng(6)
    f = Tensor(rng.integers(-8, 9, (1, 1, 5, 5, 5)).astype(np.float64))
    base = {p: directional_moments(f, "h")[p].data.copy() for p in MOMENT_TRIPLES}
    flipped = Tensor(np.flip(f.data, axis=2).copy())
    mirror = directional_moments(flipped, "h")
    for pqr in MOMENT_TRIPLES:
        p = pqr[0]
        got = np.flip(mirror[pqr].data, axis=2)
        want = base[pqr] if p % 2 == 0 else -base[pqr]
        _require(np.array_equal(got, want),
                 f"flip symmetry broken for triple {pqr}")
    return "exact, all six triples"


def check_constant_field_moments():
    # dyadic constants keep every intermediate product exact
    for n in (8, 16, 24):
        for c in (0.5, 1.0, 3.5):
            f = Tensor(np.full((1, 1, n, n, n), c))
            v = normalized_moments(f).as_array()
            want = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
            _require(np.array_equal(v, want),
                     f"constant {c} at {n}^3 gave {v}, want {want}")
    return "exactly (1,1,1,0,0,0) at 8/16/24"


def check_directional_linearity():
    rng = np.random.default_rng(7)
    f = rng.standard_normal((1, 2, 5, 5, 5))
    g = rng.standard_normal((1, 2, 5, 5, 5))
    a, b = 2.5, -1.25
    lhs = directional_moments(Tensor(a * f + b * g), "w")
    mf = directional_moments(Tensor(f), "w")
    mg = directional_moments(Tensor(g), "w")
    worst = max(np.max(np.abs(lhs[p].data - (a * mf[p].data + b * mg[p].data)))
                for p in MOMENT_TRIPLES)
    _require(worst < 1e-12, f"linearity violated by {worst}")
    return f"max dev {worst:.1e}"


def check_mvma_lambda_zero_identity():
    rng = np.random.default_rng(8)
    C = 3
    f = Tensor(rng.standard_normal((2, C, 4, 4, 4)))
    params = MomentAttentionParams(
        kernels={a: Tensor(rng.standard_normal((C, 6 * C, 1, 1, 1)))
                 for a in "hwl"},
        biases={a: Tensor(rng.standard_normal(C)) for a in "hwl"},
        lambda_p=Tensor(0.0))
    out = mvma_attention(f, params)
    _require(np.array_equal(out.data, f.data), "lambda_P=0 is not the identity")
    return "bitwise identity"


def _random_moment_vector(rng):
    f = Tensor(rng.standard_normal((1, 1, 5, 5, 5)) + 2.0)
    return normalized_moments(f)


def check_msgc_nonnegative_and_zero():
    rng = np.random.default_rng(9)
    K, alpha, beta = 2, [0.25, 0.25], [0.25, 0.25]
    for _ in range(20):
        layers = [(_random_moment_vector(rng), _random_moment_vector(rng))
                  for _ in range(K)]
        ns = (_random_moment_vector(rng), _random_moment_vector(rng))
        gp = (_random_moment_vector(rng), _random_moment_vector(rng))
        v = float(msgc_loss(layers, ns, gp, alpha, beta).data)
        _require(v >= 0.0, f"msgc loss negative: {v}")
    same = _random_moment_vector(rng)
    z = float(msgc_loss([(same, same)] * K, (same, same), (same, same),
                        alpha, beta).data)
    _require(z == 0.0, f"matched vectors give msgc {z}, want exactly 0")
    return "nonnegative; zero when matched"


def check_grad_moments():
    rng = np.random.default_rng(10)
    f = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    w = {p: rng.standard_normal() for p in MOMENT_TRIPLES}
    e1 = finite_difference_check(
        lambda t: sum((directional_moments(t, "l")[p] * Tensor(w[p])).sum()
                      for p in MOMENT_TRIPLES), f, num_probes=30, rng=rng)
    f2 = Tensor(rng.standard_normal((1, 1, 4, 4, 4)) + 2.0)

    def nm_sum(t):
        v = normalized_moments(t)
        return sum((v.values[p] * Tensor(w[p]) for p in MOMENT_TRIPLES),
                   Tensor(0.0))
    e2 = finite_difference_check(nm_sum, f2, num_probes=30, rng=rng)

    ref_ns = _random_moment_vector(rng)
    ref_gp = _random_moment_vector(rng)

    def msgc_of(t):
        v = normalized_moments(t)
        return msgc_loss([(v, v)], (ref_ns, ref_ns), (ref_gp, ref_gp),
                         [0.5], [0.5])
    e3 = finite_difference_check(msgc_of, f2, num_probes=30, rng=rng)
    worst = max(e1, e2, e3)
    _require(worst < 1e-4, f"moment gradient rel error {worst}")
    return f"rel err {worst:.2e}"


def check_grad_mvma():
    rng = np.random.default_rng(11)
    C = 2
    f = Tensor(rng.standard_normal((1, C, 4, 4, 4)))
    params = MomentAttentionParams(
        kernels={a: Tensor(0.1 * rng.standard_normal((C, 6 * C, 1, 1, 1)),
                           requires_grad=True) for a in "hwl"},
        biases={a: Tensor(0.1 * rng.standard_normal(C), requires_grad=True)
                for a in "hwl"},
        lambda_p=Tensor(0.3, requires_grad=True))
    w = Tensor(rng.standard_normal((1, C, 4, 4, 4)))
    err = finite_difference_check(
        lambda t: (mvma_attention(t, params) * w).sum(), f,
        num_probes=40, rng=rng)
    _require(err < 1e-4, f"mvma gradient rel error {err}")
    return f"rel err {err:.2e}"


def check_moment_scale_invariance():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(20):
        bump = _smooth_bump_field((24, 24, 24), rng)
        fld = 1.5 + 0.8 * bump
        hi = Tensor(fld[None, None])
        lo = T.resample_trilinear(hi, (12, 12, 12))
        dev = np.max(np.abs(normalized_moments(hi).as_array()
                            - normalized_moments(lo).as_array()))
        worst = max(worst, dev)
    _require(worst < 2e-2, f"downsampling moment deviation {worst} >= 2e-2")
    return f"max component dev {worst:.2e}"


# --- wave warp ----------------------------------------------------------

def check_warp_displacement_bound():
    p = WaveParams(amplitude=0.05, frequency=2.0)
    g = build_wave_grid((9, 11, 13), p)
    disp = np.max(np.abs(g - identity_grid((9, 11, 13))))
    _require(disp <= p.amplitude + 1e-15,
             f"displacement {disp} exceeds amplitude {p.amplitude}")
    return f"sup-norm {disp:.4f} <= A"


def check_warp_monotonicity():
    p = WaveParams(amplitude=0.05, frequency=2.0)
    c = np.linspace(-1.0, 1.0, 10000)
    m = c + p.amplitude * np.sin(2.0 * np.pi * p.frequency * c)
    _require(np.all(np.diff(m) > 0), "per-axis warp map is not strictly increasing")
    return "strictly increasing over 1e4 samples"


def check_warp_range_preservation():
    rng = np.random.default_rng(13)
    vol = Tensor(rng.standard_normal((2, 1, 6, 6, 6)))
    out = grid_sample_trilinear(vol, build_wave_grid((6, 6, 6),
                                                     WaveParams(0.05, 2.0)))
    lo, hi = vol.data.min(), vol.data.max()
    _require(out.data.min() >= lo - 1e-12 and out.data.max() <= hi + 1e-12,
             f"warp output range [{out.data.min()}, {out.data.max()}] "
             f"escapes input range [{lo}, {hi}]")
    return "convex-combination range holds"


def check_grad_grid_sample():
    rng = np.random.default_rng(14)
    vol = Tensor(rng.standard_normal((1, 2, 5, 5, 5)))
    grid = build_wave_grid((5, 5, 5), WaveParams(0.05, 2.0))
    w = Tensor(rng.standard_normal((1, 2, 5, 5, 5)))
    err = finite_difference_check(
        lambda t: (grid_sample_trilinear(t, grid) * w).sum(), vol,
        num_probes=40, rng=rng)
    _require(err < 1e-6, f"grid-sample gradient rel error {err}")
    return f"rel err {err:.2e}"


# --- selective scan / GIIM ---------------------------------------------

def check_scan_vs_naive():
    rng = np.random.default_rng(15)
    worst = 0.0
    for _ in range(200):
        M = int(rng.integers(1, 4))
        L = int(rng.integers(1, 65))
        N = int(rng.integers(1, 9))
        params = init_ssm_params(N, rng, "p", {})
        x = rng.standard_normal((M, L))
        fast = selective_scan(Tensor(x), params).data
        slow = selective_scan_naive(x, params)
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    _require(worst < 1e-10, f"scan vs naive recurrence max diff {worst}")
    return f"200 cases, max diff {worst:.1e}"


def check_scan_reorder_roundtrip():
    rng = np.random.default_rng(16)
    f = Tensor(rng.standard_normal((3, 4, 11)))
    for d in DIRECTIONS:
        seq, restore = make_sequences(f, d)
        back = restore(seq)
        _require(np.array_equal(back.data, f.data),
                 f"direction {d!r} reorder round-trip is not bitwise")
    return "bitwise, all four directions"


def check_scan_stability():
    rng = np.random.default_rng(17)
    for _ in range(20):
        N = int(rng.integers(1, 6))
        params = init_ssm_params(N, rng, "p", {})
        c = float(rng.uniform(-2.0, 2.0))
        x = np.full((1, 128), c)
        delta = float(np.logaddexp(0.0, params.w_delta.data * c
                                   + params.b_delta.data))
        abar = np.exp(delta * params.a.data)
        bbar_x = delta * (c * params.w_b.data + params.c_b.data) * c
        bound = np.max(np.abs(bbar_x)) / (1.0 - np.max(abar))
        # replay the recurrence and track the running state magnitude
        h = np.zeros(N)
        for _ in range(128):
            h = abar * h + bbar_x
            _require(np.max(np.abs(h)) <= bound + 1e-9,
                     f"state magnitude {np.max(np.abs(h))} exceeds bound {bound}")
        out = selective_scan(Tensor(x), params).data
        _require(np.all(np.isfinite(out)), "scan overflowed on constant sequence")
    return "bounded, no overflow"


def check_grad_scan():
    rng = np.random.default_rng(18)
    params = init_ssm_params(4, rng, "p", {})
    x = Tensor(rng.standard_normal((2, 12)))
    w = Tensor(rng.standard_normal((2, 12)))
    errs = [finite_difference_check(
        lambda t: (selective_scan(t, params) * w).sum(), x, rng=rng)]
    for name in ("a", "w_delta", "b_delta", "w_b", "c_b", "w_c", "c_c", "d"):
        p = getattr(params, name)

        def f(t, name=name):
            kw = {n: getattr(params, n) for n in
                  ("a", "w_delta", "b_delta", "w_b", "c_b", "w_c", "c_c", "d")}
            kw[name] = t
            from .ssm import SsmParams
            return (selective_scan(x, SsmParams(**kw)) * w).sum()
        errs.append(finite_difference_check(f, p, rng=rng))
    worst = max(errs)
    _require(worst < 1e-4, f"scan gradient rel error {worst}")
    return f"rel err {worst:.2e} over tokens + 8 params"


def check_giim_disabled_identity():
    rng = np.random.default_rng(19)
    params = init_giim_params(4, 4, rng, "g", {})
    f = Tensor(rng.standard_normal((2, 4, 3, 3, 3)))
    out = giim_block(f, params, 0.5, 0.5, enabled=False)
    _require(out is f, "disabled block is not the identity")
    return "identity when disabled"


# --- network ------------------------------------------------------------

def check_network_shapes():
    rng = np.random.default_rng(20)
    for depth in (2, 3):
        for n in (16, 24, 32):
            cfg = NetConfig(depth=depth, base_channels=4,
                            input_shape=(n, n, n), ssm_state_dim=2)
            params = build_network(cfg, seed=21)
            x = rng.standard_normal((1, 1, n, n, n))
            out = forward(x, params, cfg)
            _require(out.prob.data.shape == (1, 2, n, n, n),
                     f"prob shape {out.prob.data.shape} at K={depth}, n={n}")
            for k in range(depth):
                s = n // 2 ** k
                c = cfg.channels(k)
                _require(out.encoder_features[k].data.shape == (1, c, s, s, s),
                         f"encoder level {k} shape off at K={depth}, n={n}")
                _require(out.decoder_features[k].data.shape == (1, c, s, s, s),
                         f"decoder level {k} shape off at K={depth}, n={n}")
            psum = out.prob.data.sum(axis=1)
            _require(np.max(np.abs(psum - 1.0)) < 1e-12,
                     "probabilities do not sum to 1")
    return "K in {2,3}, n in {16,24,32}"


def check_network_ablation_toggles():
    rng = np.random.default_rng(22)
    cfg = NetConfig(depth=2, base_channels=4, input_shape=(8, 8, 8),
                    ssm_state_dim=2)
    params = build_network(cfg, seed=23)
    x = rng.standard_normal((1, 1, 8, 8, 8))
    base = forward(x, params, cfg).prob.data
    # lambda_P initializes at zero, so the attention toggle is a no-op there
    off = forward(x, params, cfg, enable_gmam=False).prob.data
    _require(np.array_equal(base, off),
             "attention toggle changes output despite lambda_P = 0")
    for name in params:
        if name.endswith("mvma.lambda_p"):
            params[name].data = np.float64(0.5)
    on = forward(x, params, cfg).prob.data
    _require(not np.array_equal(base, on),
             "attention has no effect with lambda_P != 0")
    no_scan = forward(x, params, cfg, enable_giim=False).prob.data
    _require(not np.array_equal(on, no_scan), "scan-block toggle has no effect")
    return "pure configuration, no duplicated paths"


def check_grad_network_probe():
    rng = np.random.default_rng(24)
    cfg = NetConfig(depth=2, base_channels=4, input_shape=(8, 8, 8),
                    ssm_state_dim=2)
    params = build_network(cfg, seed=25)
    for name in params:
        if name.endswith("mvma.lambda_p"):
            params[name].data = np.float64(0.2)
    x = rng.standard_normal((1, 1, 8, 8, 8))
    y = (rng.random((1, 8, 8, 8)) < 0.3).astype(np.float64)

    def loss_value():
        out = forward(x, params, cfg)
        return supervised_loss(out.prob, y, alpha_e=0.5)

    loss = loss_value()
    T.backward(loss)
    names = sorted(params)
    worst = 0.0
    step = 1e-5
    for _ in range(20):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(rng.integers(s) for s in p.data.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        orig = p.data[idx]
        p.data[idx] = orig + step
        with T.no_grad():
            fp = float(loss_value().data)
        p.data[idx] = orig - step
        with T.no_grad():
            fm = float(loss_value().data)
        p.data[idx] = orig
        num = (fp - fm) / (2 * step)
        worst = max(worst, abs(analytic - num) / max(1.0, abs(analytic), abs(num)))
    _require(worst < 1e-3, f"end-to-end gradient probe rel error {worst}")
    return f"rel err {worst:.2e} over 20 parameters"


# --- trainer ------------------------------------------------------------

def _tiny_training(steps, seed=26, **cfg_kw):
    rng = np.random.default_rng(seed)
    spec = PhantomSpec(grid_size=8, semi_axes_range=(1.5, 2.0), margin=1,
                       center_jitter=0.5)
    lab = generate_phantom(spec, rng, "l0")
    unl = generate_phantom(spec, rng, "u0")
    cfg = TrainConfig(seed=seed, augment_data=False, **cfg_kw)
    net = NetConfig(depth=2, base_channels=4, input_shape=(8, 8, 8),
                    ssm_state_dim=2)
    params = build_network(net, cfg.seed)
    state = TrainerState(student=params, teacher=clone_params(params),
                         net_config=net, rng=np.random.default_rng(cfg.seed + 1))
    records = []
    for _ in range(steps):
        records.append(train_step(state, lab.intensities[None, None],
                                  lab.label[None], unl.intensities[None, None],
                                  cfg, ramp_len=max(steps // 2, 1)))
    return state, records


def check_loss_decomposition():
    _, recs = _tiny_training(6)
    worst = max(abs(r["L_total"] - (r["L_s"] + r["gamma1_eff"] * r["L_c"]
                                    + r["gamma2_eff"] * r["L_gmc"]))
                for r in recs)
    _require(worst < 1e-12, f"loss decomposition off by {worst}")
    return f"max dev {worst:.1e} over 6 steps"


def check_loss_nonnegative():
    _, recs = _tiny_training(6, seed=27)
    for r in recs:
        _require(r["L_s"] >= 0 and r["L_c"] >= 0 and r["L_gmc"] >= 0,
                 f"negative loss component: {r}")
    return "L_s, L_c, L_gmc >= 0"


def check_teacher_no_grad():
    state, _ = _tiny_training(2, seed=28)
    leaked = [n for n, p in state.teacher.items()
              if p.grad is not None and np.any(p.grad != 0)]
    _require(not leaked, f"teacher gradient leak through {leaked[:3]}")
    return "teacher gradients identically zero"


def check_ema_convexity():
    rng = np.random.default_rng(29)
    spec = PhantomSpec(grid_size=8, semi_axes_range=(1.5, 2.0), margin=1,
                       center_jitter=0.5)
    lab = generate_phantom(spec, rng, "l0")
    unl = generate_phantom(spec, rng, "u0")
    cfg = TrainConfig(seed=29, augment_data=False)
    net = NetConfig(depth=2, base_channels=4, input_shape=(8, 8, 8),
                    ssm_state_dim=2)
    params = build_network(net, cfg.seed)
    state = TrainerState(student=params, teacher=clone_params(params),
                         net_config=net, rng=np.random.default_rng(30))
    lo = {n: np.minimum(state.teacher[n].data, state.student[n].data)
          for n in params}
    hi = {n: np.maximum(state.teacher[n].data, state.student[n].data)
          for n in params}
    for _ in range(5):
        train_step(state, lab.intensities[None, None], lab.label[None],
                   unl.intensities[None, None], cfg, ramp_len=4)
        for n in params:
            lo[n] = np.minimum(lo[n], state.student[n].data)
            hi[n] = np.maximum(hi[n], state.student[n].data)
            t = state.teacher[n].data
            _require(np.all(t >= lo[n] - 1e-12) and np.all(t <= hi[n] + 1e-12),
                     f"teacher parameter {n} escaped its history envelope")
    return "teacher inside student/teacher history envelope"


def check_training_determinism():
    a, _ = _tiny_training(4, seed=31)
    b, _ = _tiny_training(4, seed=31)
    for n in a.student:
        _require(np.array_equal(a.student[n].data, b.student[n].data),
                 f"student parameter {n} differs across identical runs")
        _require(np.array_equal(a.teacher[n].data, b.teacher[n].data),
                 f"teacher parameter {n} differs across identical runs")
    return "bitwise parameter trajectories"


def check_grad_losses():
    rng = np.random.default_rng(32)
    logits = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
    y = (rng.random((1, 4, 4, 4)) < 0.4).astype(np.float64)
    e1 = finite_difference_check(
        lambda t: supervised_loss(T.softmax(t, 1), y, 0.5), logits,
        num_probes=40, rng=rng)
    ref = T.softmax(Tensor(rng.standard_normal((1, 2, 4, 4, 4))), 1)
    ref2 = T.softmax(Tensor(rng.standard_normal((1, 2, 4, 4, 4))), 1)
    e2 = finite_difference_check(
        lambda t: consistency_loss(T.softmax(t, 1), ref, ref2), logits,
        num_probes=40, rng=rng)
    worst = max(e1, e2)
    _require(worst < 1e-4, f"loss gradient rel error {worst}")
    return f"rel err {worst:.2e}"


# --- metrics ------------------------------------------------------------

def _independent_boundary(mask):
    m = np.asarray(mask, bool)
    pad = np.pad(m, 1, constant_values=False)
    nb = np.zeros_like(m)
    for ax in range(3):
        for sh in (-1, 1):
            nb |= ~np.roll(pad, sh, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(m & nb)


def _brute_force_metrics(a, b, spacing):
    pa = _independent_boundary(a) * np.asarray(spacing)
    pb = _independent_boundary(b) * np.asarray(spacing)
    dab = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1)).min(1)
    dba = np.sqrt(((pb[:, None] - pa[None]) ** 2).sum(-1)).min(1)

    def rank95(d):
        s = np.sort(d)
        return s[max(int(math.ceil(0.95 * s.size)) - 1, 0)]
    hd = max(rank95(dab), rank95(dba))
    asd = (dab.sum() + dba.sum()) / (dab.size + dba.size)
    return hd, asd, max(dab.max(), dba.max())


def _random_mask_pair(rng):
    n = int(rng.integers(6, 17))
    while True:
        a = ndimage.binary_dilation(rng.random((n, n, n)) < 0.03,
                                    iterations=int(rng.integers(1, 3)))
        b = ndimage.binary_dilation(rng.random((n, n, n)) < 0.03,
                                    iterations=int(rng.integers(1, 3)))
        if a.any() and b.any():
            return a, b


def check_metric_oracle():
    rng = np.random.default_rng(33)
    worst = 0.0
    for _ in range(100):
        a, b = _random_mask_pair(rng)
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        inter = np.logical_and(a, b).sum()
        d_ref = 2.0 * inter / (a.sum() + b.sum())
        j_ref = inter / np.logical_or(a, b).sum()
        _require(M.dice(a, b) == d_ref and M.jaccard(a, b) == j_ref,
                 "set metric disagrees with direct formula")
        hd_ref, asd_ref, hd_max = _brute_force_metrics(a, b, spacing)
        worst = max(worst, abs(M.hd95(a, b, spacing) - hd_ref),
                    abs(M.asd(a, b, spacing) - asd_ref))
        _require(M.hd95(a, b, spacing) <= hd_max + 1e-12,
                 "hd95 exceeds the exact Hausdorff distance")
        _require(M.asd(a, b, spacing) <= M.hd95(a, b, spacing) + 1e-12,
                 "asd exceeds hd95 on the property corpus")
    _require(worst < 1e-9, f"distance metric oracle deviation {worst}")
    return f"100 pairs, max dev {worst:.1e}"


def check_metric_identities():
    rng = np.random.default_rng(34)
    for _ in range(30):
        a, b = _random_mask_pair(rng)
        d, j = M.dice(a, b), M.jaccard(a, b)
        _require(abs(j - d / (2.0 - d)) < 1e-15, f"J != D/(2-D): {d} {j}")
    a, b = _random_mask_pair(rng)
    big_a = np.zeros((24, 24, 24), bool)
    big_b = np.zeros((24, 24, 24), bool)
    big_a[:a.shape[0], :a.shape[1], :a.shape[2]] = a
    big_b[:b.shape[0], :b.shape[1], :b.shape[2]] = b
    base = (M.dice(big_a, big_b), M.jaccard(big_a, big_b),
            M.hd95(big_a, big_b), M.asd(big_a, big_b))
    sh = (np.roll(big_a, (3, 2, 1), (0, 1, 2)), np.roll(big_b, (3, 2, 1), (0, 1, 2)))
    moved = (M.dice(*sh), M.jaccard(*sh), M.hd95(*sh), M.asd(*sh))
    _require(np.allclose(base, moved, atol=1e-12),
             f"translation changed metrics: {base} vs {moved}")
    return "J=D/(2-D); translation invariant"


# --- data ---------------------------------------------------------------

def check_phantom_reproducibility():
    spec = PhantomSpec()
    a = generate_phantom(spec, np.random.default_rng(35), "v")
    b = generate_phantom(spec, np.random.default_rng(35), "v")
    _require(np.array_equal(a.intensities, b.intensities)
             and np.array_equal(a.label, b.label),
             "phantom generation is not seed-reproducible")
    va = augment(a, np.random.default_rng(36), crop_size=16)
    vb = augment(b, np.random.default_rng(36), crop_size=16)
    _require(np.array_equal(va.intensities, vb.intensities),
             "augmentation is not seed-reproducible")
    return "seed-reproducible"


def check_augment_connectivity():
    rng = np.random.default_rng(37)
    spec = PhantomSpec()
    struct = ndimage.generate_binary_structure(3, 1)
    for i in range(10):
        v = generate_phantom(spec, rng, f"v{i}")
        _, n0 = ndimage.label(v.label, struct)
        _require(n0 == 1, f"phantom label has {n0} components")
        va = augment(v, rng)
        _, n1 = ndimage.label(va.label, struct)
        _require(n1 == 1, f"augmented label has {n1} components")
    return "single foreground component preserved"


def check_normalization():
    rng = np.random.default_rng(38)
    x = rng.uniform(10.0, 50.0, (16, 16, 16))
    y = normalize_intensities(x)
    _require(abs(y.mean()) < 1e-9, f"post-normalization mean {y.mean()}")
    _require(abs(y.var() - 1.0) < 1e-9, f"post-normalization variance {y.var()}")
    return f"|mean| {abs(y.mean()):.1e}, |var-1| {abs(y.var()-1):.1e}"


# --- mutation fixture ----------------------------------------------------

def check_mutation_msgc_sign():
    """A deliberately sign-broken moment consistency must trip the detector.

    The mutant drops the absolute value from the per-triple comparison; on
    the seeded fixture it produces a negative "loss", which the
    non-negativity property rejects.
    """
    rng = np.random.default_rng(39)

    def mutant(student_layers, teacher_ns, teacher_gp, alpha, beta):
        total = Tensor(0.0)
        for k, (enc, dec) in enumerate(student_layers):
            for s, t_ns, t_gp in ((enc, teacher_ns[0], teacher_gp[0]),
                                  (dec, teacher_ns[1], teacher_gp[1])):
                for p in MOMENT_TRIPLES:
                    d_ns = s.values[p] - t_ns.values[p]   # sign error: no abs
                    d_gp = s.values[p] - t_gp.values[p]
                    total = total + Tensor(alpha[k]) * d_ns \
                        + Tensor(beta[k]) * d_gp
        return total
    tripped = False
    for _ in range(10):
        layers = [(_random_moment_vector(rng), _random_moment_vector(rng))]
        ns = (_random_moment_vector(rng), _random_moment_vector(rng))
        gp = (_random_moment_vector(rng), _random_moment_vector(rng))
        good = float(msgc_loss(layers, ns, gp, [0.5], [0.5]).data)
        bad = float(mutant(layers, ns, gp, [0.5], [0.5]).data)
        _require(good >= 0.0, "reference implementation went negative")
        if bad < 0.0:
            tripped = True
    _require(tripped, "sign-error mutant evaded the non-negativity detector")
    return "mutant detected by non-negativity"


CHECKS = [
    ("tensor.grad.conv3d", check_grad_conv3d),
    ("tensor.grad.resample", check_grad_resample),
    ("tensor.grad.activations", check_grad_activations),
    ("tensor.backward-twice-doubles", check_backward_twice_doubles),
    ("tensor.forward-determinism", check_forward_determinism),
    ("moments.flip-symmetry", check_moment_flip_symmetry),
    ("moments.constant-field-exact", check_constant_field_moments),
    ("moments.directional-linearity", check_directional_linearity),
    ("moments.attention-lambda-zero-identity", check_mvma_lambda_zero_identity),
    ("moments.consistency-nonnegative", check_msgc_nonnegative_and_zero),
    ("moments.grad", check_grad_moments),
    ("moments.grad.attention", check_grad_mvma),
    ("moments.scale-invariance", check_moment_scale_invariance),
    ("warp.displacement-bound", check_warp_displacement_bound),
    ("warp.monotonicity", check_warp_monotonicity),
    ("warp.range-preservation", check_warp_range_preservation),
    ("warp.grad.grid-sample", check_grad_grid_sample),
    ("scan.vs-naive-recurrence", check_scan_vs_naive),
    ("scan.reorder-roundtrip", check_scan_reorder_roundtrip),
    ("scan.stability", check_scan_stability),
    ("scan.grad", check_grad_scan),
    ("scan.disabled-identity", check_giim_disabled_identity),
    ("network.shape-contract", check_network_shapes),
    ("network.ablation-toggles", check_network_ablation_toggles),
    ("network.grad.end-to-end-probe", check_grad_network_probe),
    ("trainer.loss-decomposition", check_loss_decomposition),
    ("trainer.loss-nonnegative", check_loss_nonnegative),
    ("trainer.teacher-no-grad", check_teacher_no_grad),
    ("trainer.ema-convexity", check_ema_convexity),
    ("trainer.determinism", check_training_determinism),
    ("trainer.grad.losses", check_grad_losses),
    ("metrics.oracle-agreement", check_metric_oracle),
    ("metrics.identities", check_metric_identities),
    ("data.reproducibility", check_phantom_reproducibility),
    ("data.augment-connectivity", check_augment_connectivity),
    ("data.normalization", check_normalization),
    ("mutation.msgc-sign-detected", check_mutation_msgc_sign),
]


def run_checks(out=print, names=None):
    """Run the suite; returns the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        if names and name not in names:
            continue
        try:
            detail = fn()
            out(f"ok   {name}: {detail}")
        except CheckFailure as exc:
            failures += 1
            out(f"FAIL {name}: {exc}")
        except Exception as exc:  # noqa: BLE001 - report, keep running
            failures += 1
            out(f"FAIL {name}: unexpected {type(exc).__name__}: {exc}")
    return failures
