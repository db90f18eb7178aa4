"""Run configuration: a nested YAML document whose every leaf is also a command-line flag."""
from __future__ import annotations

import copy
from dataclasses import fields
from pathlib import Path

import yaml

from .data import SyntheticSceneSpec
from .errors import ConfigError
from .features import BackboneConfig
from .global_branch import GlobalAEConfig
from .inference import check_levels
from .local_branch import FRNConfig, LossConfig
from .trainer import ModelConfig, TrainConfig

# FRN/GAE fields that are always derived from the backbone are not user keys.
_DERIVED = {"frn": {"in_channels"}, "gae": {"image_size", "out_channels", "out_size"}}


_COUNTS = {"n_normal": 40, "n_structural": 20, "n_logical": 20, "n_validation": 10, "n_test_normal": 20}


def _section(cls, skip=()):
    obj = cls()
    return {f.name: _plain(getattr(obj, f.name)) for f in fields(cls) if f.name not in skip}


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


DEFAULTS = {
    "backbone": _section(BackboneConfig),
    # null widths follow the backbone projection width
    "frn": {**_section(FRNConfig, _DERIVED["frn"]), "encoder_channels": None, "decoder_channels": None},
    "gae": _section(GlobalAEConfig, _DERIVED["gae"]),
    "loss": _section(LossConfig),
    "train": _section(TrainConfig),
    "calibration": {"alpha": 0.9, "beta": 0.995},
    "data": {"root": None, "category": None, "holdout": 0.1, "require_masks": True},
    "synthetic": {**_section(SyntheticSceneSpec, {"objects"}), **_COUNTS},
    "output": {"dir": "runs/ulsad", "checkpoint": None, "sigma": 4.0, "batch_size": 8},
}

# short flags for keys whose bare name is ambiguous or too generic
ALIASES = {"seed": "train.seed", "data": "data.root", "out": "output.dir", "checkpoint": "output.checkpoint"}


def leaf_keys(tree=DEFAULTS):
    return [f"{s}.{k}" for s, sub in tree.items() for k in sub]


def flag_names():
    """Map every accepted flag spelling (without dashes) to a dotted key."""
    keys = leaf_keys()
    counts = {}
    for k in keys:
        leaf = k.split(".", 1)[1]
        counts[leaf] = counts.get(leaf, 0) + 1
    names = {k: k for k in keys}
    for k in keys:
        leaf = k.split(".", 1)[1]
        if counts[leaf] == 1 and leaf not in ALIASES:
            names[leaf.replace("_", "-")] = k
    for alias, k in ALIASES.items():
        names[alias] = k
    return names


def parse_value(text: str):
    """Flag values use YAML scalar syntax: ``false``, ``0.9``, ``[64, 64]``, ``null``."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}") from exc


def merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {where}{key!r} must be a mapping")
            out[key] = merge(out[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def set_key(tree: dict, dotted: str, value) -> None:
    section, key = dotted.split(".", 1)
    if section not in tree or key not in tree[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    tree[section][key] = value


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the YAML file, then ``overrides`` ({dotted key: value}); flags win."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = merge(cfg, doc)
    for key, value in (overrides or {}).items():
        set_key(cfg, key, value)
    validate(cfg)
    return cfg


def _build(cls, section, **extra):
    try:
        return cls(**section, **extra)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def model_config(cfg: dict) -> ModelConfig:
    bb = _build(BackboneConfig, cfg["backbone"])
    frn = _build(FRNConfig, cfg["frn"], in_channels=bb.width)
    gae = _build(GlobalAEConfig, cfg["gae"], image_size=bb.image_size, out_channels=bb.width, out_size=bb.feature_size)
    return ModelConfig(backbone=bb, frn=frn, gae=gae, loss=_build(LossConfig, cfg["loss"]))


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, cfg["train"])


def synthetic_spec(cfg: dict) -> SyntheticSceneSpec:
    scene = {k: v for k, v in cfg["synthetic"].items() if k not in _COUNTS}
    return _build(SyntheticSceneSpec, scene)


def validate(cfg: dict) -> None:
    model_config(cfg)
    train_config(cfg)
    synthetic_spec(cfg)
    check_levels(cfg["calibration"]["alpha"], cfg["calibration"]["beta"])
    if not 0 < cfg["data"]["holdout"] < 1:
        raise ConfigError("data.holdout must be in (0, 1)")


def dump_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path
