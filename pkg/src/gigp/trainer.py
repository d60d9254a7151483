"""Mean-teacher training loop.

One step: student forward on [labeled || unlabeled], teacher forwards on a
noise-perturbed and a wave-warped copy of the unlabeled samples, weighted
loss assembly, SGD-with-momentum on the student, EMA update of the teacher.

The labeled-only baseline is the gamma1 = gamma2 = 0 configuration of the
same code path, so the two are bitwise identical by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .moments import DegenerateFieldError, channel_collapse, msgc_loss, normalized_moments
from .network import NetConfig, forward
from .wavewarp import WaveParams, apply_ggpc
from .data import augment
from . import metrics as M

CSV_HEADER = "iter,epoch,L_total,L_s,L_c,L_gmc,val_dice,val_jaccard,val_hd95,val_asd"


@dataclass
class TrainConfig:
    gamma1: float = 0.1            # consistency weight
    gamma2: float = 0.01           # moment-consistency weight
    alpha_e: float = 0.5           # cross-entropy weight inside the supervised loss
    lambda1: float = 0.5           # inter-channel scan weight
    lambda2: float = 0.5           # inter-sample scan weight
    alpha_k: list | None = None    # per-level noise-branch moment weights
    beta_k: list | None = None     # per-level warp-branch moment weights
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 3e-5
    ema_decay: float = 0.99
    ramp_len: int = 0              # 0 -> half of total iterations
    epochs: int = 14
    batch_labeled: int = 1
    batch_unlabeled: int = 1
    noise_sigma: float = 0.1
    noise_clip: float = 0.2
    wave_amplitude: float = 0.05
    wave_frequency: float = 2.0
    enable_gmam: bool = True
    enable_ggpc: bool = True
    enable_giim: bool = True
    augment_data: bool = True
    eval_every_epochs: int = 1
    seed: int = 0

    def validate(self):
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch composition requires m >= 1 and n >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay {self.ema_decay} outside [0, 1]")
        for name in ("gamma1", "gamma2", "alpha_e", "lambda1", "lambda2", "lr",
                     "momentum", "weight_decay", "noise_sigma", "noise_clip"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def level_weights(self, depth):
        alpha = list(self.alpha_k) if self.alpha_k is not None \
            else [1.0 / (2 * depth)] * depth
        beta = list(self.beta_k) if self.beta_k is not None \
            else [1.0 / (2 * depth)] * depth
        if len(alpha) != depth or len(beta) != depth:
            raise ValueError(f"alpha_k/beta_k must have {depth} entries")
        if not self.enable_ggpc:
            beta = [0.0] * depth
        return alpha, beta


@dataclass
class TrainerState:
    student: dict                  # name -> Tensor
    teacher: dict
    net_config: NetConfig
    iteration: int = 0
    momentum_buffers: dict = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def clone_params(params):
    return {name: Tensor(t.data.copy(), requires_grad=True)
            for name, t in params.items()}


# loss components -------------------------------------------------------

def supervised_loss(prob, labels, alpha_e):
    """Soft Dice plus weighted voxel cross-entropy against a binary mask."""
    y = np.asarray(labels, dtype=np.float64)
    if prob.data.shape[0] != y.shape[0] or prob.data.shape[2:] != y.shape[1:]:
        raise ValueError(f"prediction {prob.data.shape} vs labels {y.shape}")
    fg = T.slice_axis(prob, 1, 1, 2).reshape(y.shape)
    yt = Tensor(y)
    eps = 1e-5
    inter = (fg * yt).sum()
    dice = (Tensor(2.0) * inter + Tensor(eps)) \
        / (fg.sum() + Tensor(float(y.sum()) + eps))
    loss = Tensor(1.0) - dice
    if alpha_e > 0:
        logp = T.log(T.clip(fg, 1e-12, 1.0))
        log1p = T.log(T.clip(Tensor(1.0) - fg, 1e-12, 1.0))
        ce = (Tensor(0.0) - (yt * logp + (Tensor(1.0) - yt) * log1p)).mean()
        loss = loss + Tensor(float(alpha_e)) * ce
    return loss


def consistency_loss(p_student, p_teacher_ns, p_teacher_gp=None):
    """MSE against the noise-branch teacher, plus the warp branch when present.

    Gradients flow to the student map only; teacher maps are detached.
    """
    def mse(a, b):
        if a.data.shape != b.data.shape:
            raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
        d = a - b.detach()
        return (d * d).mean()

    loss = mse(p_student, p_teacher_ns)
    if p_teacher_gp is not None:
        loss = loss + mse(p_student, p_teacher_gp)
    return loss


def total_loss(l_s, l_c, l_gmc, gamma1, gamma2):
    out = (l_s + Tensor(float(gamma1)) * l_c) + Tensor(float(gamma2)) * l_gmc
    if not np.isfinite(out.data):
        raise FloatingPointError(
            f"non-finite total loss: L_s={float(l_s.data)} L_c={float(l_c.data)} "
            f"L_gmc={float(l_gmc.data)}")
    return out


def ramp_weight(iteration, ramp_len):
    if ramp_len < 1:
        raise ValueError("ramp length must be >= 1")
    frac = min(iteration, ramp_len) / ramp_len
    return math.exp(-5.0 * (1.0 - frac) ** 2)


def noise_perturb(batch, sigma, clip, rng):
    batch = np.asarray(batch, dtype=np.float64)
    if sigma == 0.0:
        return batch.copy()
    noise = np.clip(sigma * rng.standard_normal(batch.shape), -clip, clip)
    return batch + noise


def ema_update(teacher, student, decay):
    if set(teacher) != set(student):
        missing = sorted(set(teacher) ^ set(student))
        raise ValueError(f"teacher/student parameter names differ: {missing}")
    for name, t in teacher.items():
        t.data = decay * t.data + (1.0 - decay) * student[name].data


# per-step machinery ----------------------------------------------------

def _collapsed_moments(feat, params, kind, level, sample_indices):
    """Per-sample normalized moment vectors of a collapsed feature map."""
    w = params[f"collapse.{kind}{level}.weights"]
    b = params[f"collapse.{kind}{level}.bias"]
    collapsed = channel_collapse(feat, w, b)
    out = []
    for i in sample_indices:
        fld = T.slice_axis(collapsed, 0, i, i + 1)
        try:
            out.append(normalized_moments(fld))
        except DegenerateFieldError:
            out.append(None)
    return out


def moment_consistency(s_out, t_ns, t_gp, student, teacher, config, n_unlabeled,
                       m_offset):
    """MSGC over the unlabeled samples; per-sample, averaged over contributors."""
    K = len(s_out.encoder_features)
    alpha, beta = config.level_weights(K)
    u = range(m_offset, m_offset + n_unlabeled)
    s_enc = [_collapsed_moments(s_out.encoder_features[k], student, "enc", k, u)
             for k in range(K)]
    s_dec = [_collapsed_moments(s_out.decoder_features[k], student, "dec", k, u)
             for k in range(K)]
    with T.no_grad():
        ns_enc = _collapsed_moments(t_ns.encoder_features[K - 1], teacher, "enc",
                                    K - 1, range(n_unlabeled))
        ns_dec = _collapsed_moments(t_ns.decoder_features[0], teacher, "dec", 0,
                                    range(n_unlabeled))
        gp_src = t_gp if t_gp is not None else t_ns
        gp_enc = _collapsed_moments(gp_src.encoder_features[K - 1], teacher, "enc",
                                    K - 1, range(n_unlabeled))
        gp_dec = _collapsed_moments(gp_src.decoder_features[0], teacher, "dec", 0,
                                    range(n_unlabeled))
    terms = []
    for j in range(n_unlabeled):
        vecs = [s_enc[k][j] for k in range(K)] + [s_dec[k][j] for k in range(K)] \
            + [ns_enc[j], ns_dec[j], gp_enc[j], gp_dec[j]]
        if any(v is None for v in vecs):
            continue  # degenerate collapsed field: skip this sample
        layers = [(s_enc[k][j], s_dec[k][j]) for k in range(K)]
        terms.append(msgc_loss(layers, (ns_enc[j], ns_dec[j]),
                               (gp_enc[j], gp_dec[j]), alpha, beta))
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out * Tensor(1.0 / len(terms))


def _sgd_step(state: TrainerState, config: TrainConfig):
    for name in sorted(state.student):
        p = state.student[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        g = g + config.weight_decay * p.data
        buf = state.momentum_buffers.get(name)
        buf = g if buf is None else config.momentum * buf + g
        state.momentum_buffers[name] = buf
        p.data = p.data - config.lr * buf


def train_step(state: TrainerState, labeled_batch, labeled_masks, unlabeled_batch,
               config: TrainConfig, ramp_len):
    """One optimization step; returns the loss-component record."""
    m, n = config.batch_labeled, config.batch_unlabeled
    if labeled_batch.shape[0] != m or unlabeled_batch.shape[0] != n:
        raise ValueError(
            f"batch sizes ({labeled_batch.shape[0]}, {unlabeled_batch.shape[0]}) "
            f"do not match configured ({m}, {n})")
    cfg_net = state.net_config
    fwd_kw = dict(enable_gmam=config.enable_gmam, enable_giim=config.enable_giim,
                  lambda1=config.lambda1, lambda2=config.lambda2)

    for p in state.student.values():
        p.zero_grad()

    supervised_only = config.gamma1 == 0.0 and config.gamma2 == 0.0
    # With both consistency weights at zero the unlabeled half contributes
    # nothing (the inter-sample scan is causal with labeled samples leading),
    # so the supervised-only configuration skips it outright.
    if supervised_only:
        student_in = labeled_batch
    else:
        student_in = np.concatenate([labeled_batch, unlabeled_batch], axis=0)
    s_out = forward(student_in, state.student, cfg_net, **fwd_kw)
    t_ns = t_gp = None
    if not supervised_only:
        noise_in = noise_perturb(unlabeled_batch, config.noise_sigma,
                                 config.noise_clip, state.rng)
        with T.no_grad():
            t_ns = forward(noise_in, state.teacher, cfg_net, **fwd_kw)
            if config.enable_ggpc:
                warp_in = apply_ggpc(unlabeled_batch,
                                     WaveParams(config.wave_amplitude,
                                                config.wave_frequency))
                t_gp = forward(warp_in, state.teacher, cfg_net, **fwd_kw)

    prob_l = T.slice_axis(s_out.prob, 0, 0, m)
    l_s = supervised_loss(prob_l, labeled_masks, config.alpha_e)
    if supervised_only:
        l_c, l_gmc = Tensor(0.0), Tensor(0.0)
    else:
        prob_u = T.slice_axis(s_out.prob, 0, m, m + n)
        l_c = consistency_loss(prob_u, t_ns.prob,
                               t_gp.prob if t_gp is not None else None)
        if config.enable_gmam and config.gamma2 > 0:
            l_gmc = moment_consistency(s_out, t_ns, t_gp, state.student,
                                       state.teacher, config, n, m)
        else:
            l_gmc = Tensor(0.0)

    w = ramp_weight(state.iteration, ramp_len)
    g1 = config.gamma1 * w
    g2 = (config.gamma2 if config.enable_gmam else 0.0) * w
    loss = total_loss(l_s, l_c, l_gmc, g1, g2)

    T.backward(loss)
    _sgd_step(state, config)
    ema_update(state.teacher, state.student, config.ema_decay)
    state.iteration += 1
    return {
        "L_total": float(loss.data), "L_s": float(l_s.data),
        "L_c": float(l_c.data), "L_gmc": float(l_gmc.data),
        "gamma1_eff": g1, "gamma2_eff": g2,
    }


# evaluation ------------------------------------------------------------

def predict_mask(volume, params, cfg_net, config: TrainConfig):
    with T.no_grad():
        out = forward(volume.intensities[None, None], params, cfg_net,
                      enable_gmam=config.enable_gmam,
                      enable_giim=config.enable_giim,
                      lambda1=config.lambda1, lambda2=config.lambda2)
    return out.prob.data[0, 1] > 0.5


def evaluate(volumes, params, cfg_net, config: TrainConfig):
    """Per-volume and mean metrics using the given (teacher) parameters."""
    rows = []
    for vol in volumes:
        pred = predict_mask(vol, params, cfg_net, config)
        rows.append({"id": vol.id,
                     **M.evaluate_pair(pred, vol.label.astype(bool), vol.spacing)})
    means = {}
    for key in ("dice", "jaccard", "hd95", "asd"):
        vals = [r[key] for r in rows if r[key] is not None]
        means[key] = float(np.mean(vals)) if vals else None
    return rows, means


# training loop ----------------------------------------------------------

def _fmt(x):
    return "" if x is None else repr(float(x))


def train_loop(labeled, unlabeled, val, config: TrainConfig, cfg_net: NetConfig,
               csv_path=None, checkpoint_fn=None, log_fn=None,
               csv_annotations=None):
    """Full training run over phantom volumes.

    labeled/unlabeled/val: lists of Volume (labeled and val carry masks).
    Returns (state, best) where best holds the best-validation teacher copy.
    """
    from .network import build_network

    config.validate()
    if not labeled or not unlabeled:
        raise ValueError("need at least one labeled and one unlabeled volume")
    student = build_network(cfg_net, config.seed)
    state = TrainerState(student=student, teacher=clone_params(student),
                         net_config=cfg_net,
                         rng=np.random.default_rng(config.seed + 1))
    if not config.enable_gmam:
        # lambda_P frozen at zero: the attention path is disabled outright
        for k in range(cfg_net.depth):
            state.student[f"enc{k}.mvma.lambda_p"].data = np.float64(0.0)

    m, n = config.batch_labeled, config.batch_unlabeled
    steps_per_epoch = max(len(unlabeled) // n, len(labeled) // m, 1)
    total_steps = config.epochs * steps_per_epoch
    ramp_len = config.ramp_len if config.ramp_len > 0 else max(total_steps // 2, 1)

    rows = [CSV_HEADER]
    for note in csv_annotations or ():
        rows.append(f"# {note}")
    best = {"dice": -1.0, "params": None, "iteration": -1}

    def draw(pool, count):
        idx = state.rng.permutation(len(pool))[:count]
        vols = [pool[i] for i in idx]
        if config.augment_data:
            vols = [augment(v, state.rng, crop_size=cfg_net.input_shape)
                    for v in vols]
        return vols

    for epoch in range(config.epochs):
        for _ in range(steps_per_epoch):
            lv = draw(labeled, m)
            uv = draw(unlabeled, n)
            lb = np.stack([v.intensities for v in lv])[:, None]
            lm = np.stack([v.label for v in lv])
            ub = np.stack([v.intensities for v in uv])[:, None]
            rec = train_step(state, lb, lm, ub, config, ramp_len)
            rows.append(",".join([str(state.iteration), str(epoch),
                                  _fmt(rec["L_total"]), _fmt(rec["L_s"]),
                                  _fmt(rec["L_c"]), _fmt(rec["L_gmc"]),
                                  "", "", "", ""]))
        if val and (epoch + 1) % config.eval_every_epochs == 0:
            _, means = evaluate(val, state.teacher, cfg_net, config)
            rows.append(",".join([str(state.iteration), str(epoch), "", "", "", "",
                                  _fmt(means["dice"]), _fmt(means["jaccard"]),
                                  _fmt(means["hd95"]), _fmt(means["asd"])]))
            if means["dice"] is not None and means["dice"] > best["dice"]:
                best = {"dice": means["dice"], "params": clone_params(state.teacher),
                        "iteration": state.iteration}
            if log_fn:
                log_fn(f"epoch {epoch}: iter {state.iteration} "
                       f"val_dice {means['dice']:.4f}")
        if checkpoint_fn:
            checkpoint_fn(state, epoch)

    if best["params"] is None:
        best = {"dice": float("nan"), "params": clone_params(state.teacher),
                "iteration": state.iteration}
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")
    return state, best
