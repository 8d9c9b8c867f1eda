"""Run configuration: a YAML document parsed strictly against documented defaults.

Every section is optional. Unknown keys anywhere are errors, so a typo such as
``learning_rate`` for ``lr`` fails loudly instead of silently training with the
default. Top-level layout::

    dataset:   source (generate|load), manifest, synthetic generator fields
    model:     hidden widths, activation, head (auto|trainable|fixed-random|fixed-orthogonal)
    method:    name, mldg {...}, metareg {...}
    schedule:  profile (desk|paper) plus any TrainConfig field as an override
    run:       held_out domain and seed for single training runs
    bench:     methods, seeds, held_out domains, workers
    out:       output directory
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional

import yaml

from .data import STYLES, SyntheticConfig
from .evaluation import HEAD_FOR_METHOD, METHODS, RunSettings
from .model import HEAD_MODES
from .trainers import PROFILES, MetaRegConfig, MLDGConfig, TrainConfig, profile_config


class ConfigError(ValueError):
    pass


def _dataclass_defaults(cls, **override):
    out = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    out.update(override)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


DEFAULTS = {
    "dataset": {"source": "generate", "manifest": None,
                **_dataclass_defaults(SyntheticConfig)},
    "model": {"hidden": [128, 256], "activation": "relu", "head": "auto"},
    "method": {"name": "baseline",
               "mldg": _dataclass_defaults(MLDGConfig, alpha=5e-3),
               "metareg": _dataclass_defaults(MetaRegConfig)},
    "schedule": {"profile": "desk", **{f.name: None for f in fields(TrainConfig)}},
    "run": {"held_out": "sketch", "seed": 0},
    "bench": {"methods": list(METHODS), "seeds": [0, 1, 2, 3, 4], "held_out": None, "workers": None},
    "out": "runs/default",
}


def _merge(defaults, given, path=""):
    if not isinstance(given, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value if value is not None else {}, where)
        else:
            out[key] = value
    return out


def resolve(document: Optional[dict] = None, profile: Optional[str] = None,
            seed: Optional[int] = None, out: Optional[str] = None) -> dict:
    """Apply defaults and command-line overrides, then validate."""
    cfg = _merge(DEFAULTS, document or {})
    if profile is not None:
        cfg["schedule"]["profile"] = profile
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
        cfg["bench"]["seeds"] = [int(seed)]
    if out is not None:
        cfg["out"] = str(out)
    validate(cfg)
    cfg["schedule"].update(asdict(train_config(cfg)))
    return cfg


def load(path, **overrides) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return resolve(doc or {}, **overrides)


def validate(cfg: dict) -> None:
    ds, sched, m = cfg["dataset"], cfg["schedule"], cfg["method"]
    if ds["source"] not in ("generate", "load"):
        raise ConfigError("dataset.source must be 'generate' or 'load'")
    if ds["source"] == "load" and not ds["manifest"]:
        raise ConfigError("dataset.manifest is required when dataset.source is 'load'")
    if sched["profile"] not in PROFILES:
        raise ConfigError(f"schedule.profile must be one of {sorted(PROFILES)}")
    if m["name"] not in METHODS:
        raise ConfigError(f"method.name {m['name']!r} is not one of {list(METHODS)}")
    head = cfg["model"]["head"]
    if head != "auto" and head not in HEAD_MODES:
        raise ConfigError(f"model.head must be 'auto' or one of {list(HEAD_MODES)}")
    if head != "auto" and head != HEAD_FOR_METHOD[m["name"]]:
        raise ConfigError(f"model.head {head!r} conflicts with method {m['name']!r}")
    for name in cfg["bench"]["methods"]:
        if name not in METHODS:
            raise ConfigError(f"bench.methods entry {name!r} is not one of {list(METHODS)}")
    if not cfg["bench"]["seeds"]:
        raise ConfigError("bench.seeds must list at least one seed")
    workers = cfg["bench"]["workers"]
    if workers is not None and (not isinstance(workers, int) or workers < 1):
        raise ConfigError("bench.workers must be a positive integer")
    # constructing the typed configs surfaces range errors with the section name
    for label, build in (("dataset", synthetic_config), ("schedule", train_config),
                         ("method.mldg", lambda c: MLDGConfig(**c["method"]["mldg"])),
                         ("method.metareg", lambda c: MetaRegConfig(**c["method"]["metareg"]))):
        try:
            build(cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {label} settings: {exc}") from exc


def synthetic_config(cfg: dict) -> SyntheticConfig:
    ds = {k: v for k, v in cfg["dataset"].items() if k not in ("source", "manifest")}
    ds["domains"] = tuple(ds["domains"] or STYLES)
    return SyntheticConfig(**ds)


def train_config(cfg: dict) -> TrainConfig:
    sched = cfg["schedule"]
    overrides = {k: v for k, v in sched.items() if k != "profile" and v is not None}
    return profile_config(sched["profile"], **overrides)


def run_settings(cfg: dict) -> RunSettings:
    return RunSettings(hidden=tuple(cfg["model"]["hidden"]), activation=cfg["model"]["activation"],
                       train=train_config(cfg), mldg=MLDGConfig(**cfg["method"]["mldg"]),
                       metareg=MetaRegConfig(**cfg["method"]["metareg"]))


def dump_resolved(cfg: dict) -> str:
    """Canonical JSON echo of the resolved config (stable key order)."""
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
