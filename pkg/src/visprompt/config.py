"""Flat run configuration shared by all CLI subcommands.

Precedence: command-line flags > config file > defaults; the effective
configuration is always written next to the outputs so every run is
reproducible from its artifacts alone.  Unknown keys are rejected.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict = {
    "dataset_name": "synthetic",
    # model dims
    "embed_dim": 32,
    "visual_dim": 48,
    "shared_dim": 24,
    "n_ctx": 16,
    "heads": 8,
    # pipeline
    "tau": 0.07,
    "ctx_mode": "class-shared",
    "variant": "full",
    "routing": "ot",
    "align_noise": 2.0,
    # loss
    "q": 0.7,
    "alpha_mode": "adaptive",
    "alpha_value": 0.5,
    # transport
    "epsilon": 0.05,
    "sinkhorn_tol": 1e-8,
    "sinkhorn_max_iters": 1000,
    "delta_rel": 0.5,
    "delta_abs": None,
    # optimization
    "lr0": 0.002,
    "epochs": 200,
    "batch": 16,
    "warmup_epochs": 1,
    "partition_refresh": 1,
    # synthetic data
    "n_classes": 10,
    "shots": 16,
    "n_tokens": 8,
    "token_dim": 48,
    "eps_v": 0.1,
    "n_informative": 5,
    "margin_scale": 1.0,
    "noise_type": "sym",
    "noise_rate": 0.0,
    "test_per_class": 20,
    "data_seed": 0,
    # seeding and paths
    "seed": 0,
    "seeds": [0, 1, 2],
    "data": None,
    "test_data": None,
}

_TYPES: dict[str, tuple] = {
    "dataset_name": (str,), "ctx_mode": (str,), "variant": (str,),
    "routing": (str,), "alpha_mode": (str,), "noise_type": (str,),
    "seeds": (list,),
    "data": (str, type(None)), "test_data": (str, type(None)),
    "delta_abs": (int, float, type(None)),
}
_INT_KEYS = {"embed_dim", "visual_dim", "shared_dim", "n_ctx", "heads",
             "sinkhorn_max_iters", "epochs", "batch", "warmup_epochs",
             "partition_refresh", "n_classes", "shots", "n_tokens",
             "token_dim", "n_informative", "test_per_class", "data_seed",
             "seed"}
_FLOAT_KEYS = {"tau", "align_noise", "q", "alpha_value", "epsilon",
               "sinkhorn_tol", "delta_rel", "lr0", "eps_v", "margin_scale",
               "noise_rate"}


def _validate_types(cfg: dict) -> None:
    for key, value in cfg.items():
        if key in _INT_KEYS:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"config key {key!r} must be an integer")
        elif key in _FLOAT_KEYS:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"config key {key!r} must be a number")
        elif key in _TYPES:
            if not isinstance(value, _TYPES[key]):
                raise ConfigError(f"config key {key!r} has the wrong type")
    if not all(isinstance(s, int) for s in cfg["seeds"]):
        raise ConfigError("config key 'seeds' must be a list of integers")
    if not cfg["seeds"]:
        raise ConfigError("config key 'seeds' must not be empty")
    if cfg["noise_type"] not in ("sym", "asym"):
        raise ConfigError("noise_type must be 'sym' or 'asym'")


def load_config(path: str | None = None,
                overrides: dict | None = None) -> dict:
    """Merge defaults, an optional JSON file and explicit overrides."""
    cfg = dict(DEFAULTS)
    env_seed = os.environ.get("VISPROMPT_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError("VISPROMPT_SEED must be an integer") from exc

    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge(cfg, loaded, source=str(path))

    if overrides:
        _merge(cfg, overrides, source="command line")
    _validate_types(cfg)
    return cfg


def _merge(cfg: dict, updates: dict, source: str) -> None:
    for key, value in updates.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} (from {source})")
        cfg[key] = value


def write_effective_config(cfg: dict, out_dir) -> Path:
    out = Path(out_dir) / "config.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out
