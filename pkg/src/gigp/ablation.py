"""Ablation harness: the six standard training arms and the small-data
trend benchmark.

Each arm is the same training loop with component toggles; `labeled-only`
zeroes both consistency weights, so the unlabeled pool contributes nothing.
"""
from __future__ import annotations

import dataclasses
import time

import numpy as np

from .data import PhantomSpec, generate_phantom, split_dataset
from .network import NetConfig
from .trainer import TrainConfig, evaluate, train_loop

# arm name -> TrainConfig overrides
ARMS = {
    "labeled-only": dict(gamma1=0.0, gamma2=0.0, enable_gmam=False,
                         enable_ggpc=False, enable_giim=False),
    "mean-teacher": dict(enable_gmam=False, enable_ggpc=False,
                         enable_giim=False),
    "mt+moment-attention": dict(enable_ggpc=False, enable_giim=False),
    "mt+warp-consistency": dict(enable_gmam=False, enable_giim=False),
    "mt+scan-block": dict(enable_gmam=False, enable_ggpc=False),
    "full": {},
}


def arm_config(name, base: TrainConfig | None = None):
    """TrainConfig for one ablation arm, derived from `base` (or defaults)."""
    if name not in ARMS:
        raise ValueError(f"unknown arm {name!r}; choose from {sorted(ARMS)}")
    base = base if base is not None else TrainConfig()
    return dataclasses.replace(base, **ARMS[name])


def make_pools(spec: PhantomSpec, count=60, num_labeled=4, data_seed=100,
               split_seed=0):
    """Generate `count` phantoms and split them into the four standard pools."""
    rng = np.random.default_rng(data_seed)
    vols = {f"p{i:03d}": generate_phantom(spec, rng, vol_id=f"p{i:03d}")
            for i in range(count)}
    split = split_dataset(sorted(vols), num_labeled=num_labeled, seed=split_seed)
    return {name: [vols[i] for i in ids] for name, ids in split.items()}


def run_arm(name, pools, base: TrainConfig, net: NetConfig, log_fn=None):
    """Train one arm and return its test-set mean metrics plus wall time."""
    cfg = arm_config(name, base)
    t0 = time.time()
    _, best = train_loop(pools["labeled"], pools["unlabeled"], pools["val"],
                         cfg, net)
    _, means = evaluate(pools["test"], best["params"], net, cfg)
    wall = time.time() - t0
    if log_fn:
        log_fn(f"{name:22s} seed {base.seed:3d} test dice {means['dice']:.4f} "
               f"({wall:.0f}s)")
    return {"arm": name, "seed": base.seed, "wall": wall, **means}


def benchmark(seeds, spec: PhantomSpec | None = None,
              net: NetConfig | None = None, base: TrainConfig | None = None,
              arms=tuple(ARMS), log_fn=None):
    """Run every arm for every seed; returns the flat result list.

    The same dataset is reused across arms and seeds so differences come
    from training alone. Augmentation defaults to off here so arm
    differences are not confounded by augmentation noise.
    """
    spec = spec if spec is not None else PhantomSpec()
    net = net if net is not None else NetConfig()
    # augmentation off so every arm sees identical batches; validating every
    # other epoch keeps the 18-run sweep inside its wall-clock budget.
    base = base if base is not None else TrainConfig(augment_data=False,
                                                     eval_every_epochs=2)
    pools = make_pools(spec)
    results = []
    for seed in seeds:
        cfg = dataclasses.replace(base, seed=int(seed))
        for arm in arms:
            results.append(run_arm(arm, pools, cfg, net, log_fn))
    return results


def summarize(results):
    """Mean test Dice per arm (percent) and the gaps the trend claims rest on.

    gap_full: full minus labeled-only; gap_<component>: single-component arm
    minus plain mean-teacher.
    """
    by_arm = {}
    for r in results:
        by_arm.setdefault(r["arm"], []).append(r["dice"])
    means = {arm: 100.0 * float(np.mean(v)) for arm, v in by_arm.items()}
    summary = {"mean_dice": means}
    if "labeled-only" in means and "full" in means:
        summary["gap_full"] = means["full"] - means["labeled-only"]
    if "mean-teacher" in means:
        for arm in ("mt+moment-attention", "mt+warp-consistency",
                    "mt+scan-block"):
            if arm in means:
                summary[f"gap_{arm}"] = means[arm] - means["mean-teacher"]
    return summary
