"""Command-line interface: dataset generation, training, evaluation, selfcheck.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, save_config
from .data import generate_phantom, load_volume, save_volume, split_dataset
from .network import load_checkpoint, save_checkpoint
from .trainer import evaluate, train_loop

MANIFEST_NAME = "manifest.json"
NUM_LABELED = 4


class CliError(Exception):
    """Validation failure reportable to the user (exit code 1)."""


def _load_run_config(args):
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg.train.seed = args.seed
    cfg.validate()
    return cfg


def cmd_gen_data(args):
    cfg = _load_run_config(args)
    out_dir = args.out or cfg.data_dir
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(manifest_path) and not args.force:
        raise CliError(f"{out_dir} already holds a dataset; pass --force to overwrite")
    os.makedirs(out_dir, exist_ok=True)

    seed = cfg.train.seed
    rng = np.random.default_rng(seed)
    ids = [f"p{i:03d}" for i in range(args.count)]
    for vid in ids:
        save_volume(generate_phantom(cfg.phantom, rng, vid),
                    os.path.join(out_dir, f"{vid}.vol"))
    split = split_dataset(ids, num_labeled=NUM_LABELED, seed=seed)
    manifest = {"version": __version__, "seed": seed, "count": args.count,
                "ids": ids, "split": split}
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.count} volumes and {MANIFEST_NAME} to {out_dir}")
    return 0


def _load_split(data_dir):
    manifest_path = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise CliError(f"no {MANIFEST_NAME} in {data_dir}; run gen-data first")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    pools = {}
    for name, ids in manifest["split"].items():
        pools[name] = [load_volume(os.path.join(data_dir, f"{vid}.vol"))
                       for vid in ids]
    return manifest, pools


def _ablation_note(cfg):
    t = cfg.train
    return (f"ablation: gmam={'on' if t.enable_gmam else 'off'} "
            f"ggpc={'on' if t.enable_ggpc else 'off'} "
            f"giim={'on' if t.enable_giim else 'off'}")


def cmd_train(args):
    cfg = _load_run_config(args)
    data_dir = args.data or cfg.data_dir
    run_dir = args.run or cfg.run_dir
    _, pools = _load_split(data_dir)
    if os.path.exists(os.path.join(run_dir, "metrics.csv")) and not args.force:
        raise CliError(f"{run_dir} already holds a run; pass --force to overwrite")
    os.makedirs(run_dir, exist_ok=True)
    save_config(cfg, os.path.join(run_dir, "config.txt"))
    with open(os.path.join(run_dir, "build.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"gigp {__version__}\n")

    state, best = train_loop(
        pools["labeled"], pools["unlabeled"], pools["val"], cfg.train, cfg.net,
        csv_path=os.path.join(run_dir, "metrics.csv"),
        csv_annotations=[_ablation_note(cfg)],
        log_fn=print)
    save_checkpoint(os.path.join(run_dir, "teacher_final.ckpt"),
                    state.teacher, cfg.net, state.iteration)
    save_checkpoint(os.path.join(run_dir, "teacher_best.ckpt"),
                    best["params"], cfg.net, best["iteration"])
    print(f"finished {state.iteration} iterations; best validation Dice "
          f"{best['dice']:.4f} at iteration {best['iteration']}")
    return 0


def _fmt_cell(v):
    return "" if v is None else f"{v:.6f}"


def cmd_eval(args):
    cfg = _load_run_config(args)
    data_dir = args.data or cfg.data_dir
    params, net_cfg, _ = load_checkpoint(args.checkpoint)
    if net_cfg != cfg.net:
        raise CliError(
            f"checkpoint network config {net_cfg} does not match the "
            f"configured one {cfg.net}; pass the run's config file")
    _, pools = _load_split(data_dir)
    if args.split not in pools:
        raise CliError(f"unknown split {args.split!r}; "
                       f"choose from {sorted(pools)}")
    rows, means = evaluate(pools[args.split], params, net_cfg, cfg.train)

    header = "id,dice,jaccard,hd95,asd"
    lines = [header]
    print(header.replace(",", "\t"))
    for r in rows:
        cells = [r["id"]] + [_fmt_cell(r[k]) for k in
                             ("dice", "jaccard", "hd95", "asd")]
        lines.append(",".join(cells))
        print("\t".join(c if c else "missing" for c in cells))
    mean_cells = ["mean"] + [_fmt_cell(means[k]) for k in
                             ("dice", "jaccard", "hd95", "asd")]
    lines.append(",".join(mean_cells))
    print("\t".join(c if c else "missing" for c in mean_cells))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def cmd_selfcheck(_args):
    from .selfcheck import run_checks
    failures = run_checks()
    return 0 if failures == 0 else 2


def build_parser():
    p = argparse.ArgumentParser(prog="gigp",
                                description="semi-supervised 3D segmentation")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override train.seed")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a phantom dataset")
    g.add_argument("--out", help="output directory (default: paths.data_dir)")
    g.add_argument("--count", type=int, default=60,
                   help="number of volumes (default 60: 40 train + 8 val + 12 test)")
    g.add_argument("--force", action="store_true",
                   help="overwrite an existing dataset")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run the mean-teacher training loop")
    t.add_argument("--data", help="dataset directory (default: paths.data_dir)")
    t.add_argument("--run", help="run directory (default: paths.run_dir)")
    t.add_argument("--force", action="store_true", help="overwrite an existing run")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: paths.data_dir)")
    e.add_argument("--split", default="test")
    e.add_argument("--out", help="write per-volume metrics CSV here")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("selfcheck", help="run the invariant/gradient suite")
    s.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
