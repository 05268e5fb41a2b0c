"""Run configuration files (YAML) with flag overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .dataset import FORMATS
from .presets import DATASETS, METHODS, preset
from .synthetic import PROFILES
from .training import TrainConfig


class ConfigError(ValueError):
    pass


HYPER_KEYS = {"lr", "tau", "upsilon", "alpha", "lam", "gamma", "m_neg", "d", "batch_size", "epochs",
              "patience", "eval_every", "n_layers", "mlp_layers", "eps"}
TOP_KEYS = {"dataset", "split_seed", "candidate_seed", "model", "preset", "seed", "hyper", "eval", "output"}
DATASET_KEYS = {"name", "path", "format", "min_core", "synthetic"}
SYNTH_KEYS = {"profile", "seed", "user_fraction", "item_fraction"}
EVAL_KEYS = {"ks", "n_neg", "repeats"}

DEFAULTS = {
    "split_seed": 0,
    "seed": 0,
    "model": "bpr-uib",
    "hyper": {},
    "eval": {"ks": [1, 10], "n_neg": 100, "repeats": 5},
    "output": None,
}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def validate(cfg: dict, base_dir: Path | None = None) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    _check_keys(cfg, TOP_KEYS, "config")
    out = copy.deepcopy(DEFAULTS)
    for k, v in cfg.items():
        if k == "eval":
            _check_keys(v or {}, EVAL_KEYS, "eval")
            out["eval"].update(v or {})
        else:
            out[k] = v
    ds = out.get("dataset")
    if not isinstance(ds, dict) or "name" not in ds:
        raise ConfigError("dataset.name is required")
    _check_keys(ds, DATASET_KEYS, "dataset")
    if ds.get("synthetic") is not None:
        _check_keys(ds["synthetic"], SYNTH_KEYS, "dataset.synthetic")
        if ds["synthetic"].get("profile") not in PROFILES:
            raise ConfigError(f"dataset.synthetic.profile must be one of {sorted(PROFILES)}")
    elif ds.get("path") is not None:
        p = Path(ds["path"])
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if not p.exists():
            raise ConfigError(f"dataset.path does not exist: {p}")
        ds["path"] = str(p)
        if ds.get("format") not in FORMATS:
            raise ConfigError(f"dataset.format must be one of {FORMATS}")
    if out["model"] not in METHODS:
        raise ConfigError(f"model must be one of {sorted(METHODS)}")
    if out.get("preset") is not None and out["preset"] not in DATASETS:
        raise ConfigError(f"preset must be one of {DATASETS}")
    _check_keys(out["hyper"] or {}, HYPER_KEYS, "hyper")
    return out


def load(path, overrides: dict | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return apply_overrides(validate(raw, path.parent), overrides or {})


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    """Flag values win over file values; ``None`` means not given."""
    cfg = copy.deepcopy(cfg)
    for k, v in overrides.items():
        if v is None:
            continue
        if k in HYPER_KEYS:
            cfg["hyper"][k] = v
        elif k in EVAL_KEYS:
            cfg["eval"][k] = v
        elif k in TOP_KEYS:
            cfg[k] = v
        else:
            raise ConfigError(f"unknown override {k!r}")
    return validate(cfg)


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    kw = {}
    if cfg.get("preset"):
        kw.update(preset(cfg["model"], cfg["preset"]))
    kw.update(cfg.get("hyper") or {})
    if "mlp_layers" in kw:
        kw["mlp_layers"] = tuple(kw["mlp_layers"])
    kw["seed"] = cfg["seed"] if seed is None else seed
    try:
        return TrainConfig(method=cfg["model"], **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_hash(cfg: dict) -> str:
    keyed = {k: cfg.get(k) for k in ("dataset", "split_seed", "candidate_seed", "model", "preset", "hyper")}
    keyed["eval_n_neg"] = cfg["eval"]["n_neg"]
    blob = json.dumps(keyed, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
