"""Flat key=value run configuration.

One line per field, `section.key = value`, sections: train, net, phantom,
ablation, paths. Every key has a default; unknown keys are rejected with
the full list of offenders. Serialization round-trips exactly.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .data import PhantomSpec
from .network import NetConfig
from .trainer import TrainConfig

# TrainConfig fields surfaced under the ablation. prefix instead of train.
ABLATION_KEYS = ("enable_gmam", "enable_ggpc", "enable_giim")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    data_dir: str = "data"
    run_dir: str = "runs/default"

    def validate(self):
        self.train.validate()
        self.net.validate()
        self.phantom.validate()


class ConfigError(ValueError):
    pass


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.split(",") if p.strip()]
        if len(parts) != len(default):
            raise ValueError(f"expected {len(default)} comma-separated values")
        return tuple(_parse_value(p, d) for p, d in zip(parts, default))
    if default is None or isinstance(default, list):
        # optional float list (e.g. per-level weights)
        if raw.lower() == "none":
            return None
        return [float(p) for p in raw.split(",") if p.strip()]
    return raw


def _sections(cfg: RunConfig):
    yield "train", cfg.train, [f.name for f in dataclasses.fields(TrainConfig)
                               if f.name not in ABLATION_KEYS]
    yield "net", cfg.net, [f.name for f in dataclasses.fields(NetConfig)]
    yield "phantom", cfg.phantom, [f.name for f in dataclasses.fields(PhantomSpec)]
    yield "ablation", cfg.train, list(ABLATION_KEYS)
    yield "paths", cfg, ["data_dir", "run_dir"]


def serialize_config(cfg: RunConfig):
    lines = []
    for section, obj, names in _sections(cfg):
        for name in names:
            lines.append(f"{section}.{name} = {_format_value(getattr(obj, name))}")
    return "\n".join(lines) + "\n"


def parse_config(text, base: RunConfig | None = None):
    cfg = base if base is not None else RunConfig()
    lookup = {}
    for section, obj, names in _sections(cfg):
        for name in names:
            lookup[f"{section}.{name}"] = (obj, name)

    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: not a key = value pair: {stripped!r}")
            continue
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in lookup:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        obj, name = lookup[key]
        try:
            setattr(obj, name, _parse_value(raw, _default_for(key)))
        except ValueError as exc:
            errors.append(f"line {lineno}: {key}: {exc}")
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def _default_for(key):
    defaults = RunConfig()
    for section, obj, names in _sections(defaults):
        for name in names:
            if f"{section}.{name}" == key:
                return getattr(obj, name)
    raise KeyError(key)


def load_config(path, base=None):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def save_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
