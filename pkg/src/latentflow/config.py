"""Experiment configuration: per-problem defaults, JSON loading, digests.

One JSON file drives every subcommand. Unknown keys are rejected early so a
typo in a config does not silently fall back to a default.
"""

from __future__ import annotations

import json
from copy import deepcopy
from pathlib import Path

from .serial import config_digest

_COMMON = {
    "codec": {
        "latent_channels": 8,
        "latent_grid": 16,
        "hidden": 24,
        "lift": 16,
        "radius": 0.35,
        "bypass": True,
        "kl_weight": 1e-6,
        "jerk_weight": 1e-3,
    },
    "denoiser": {
        "width": 64,
        "depth": 4,
        "heads": 4,
        "history": 2,
        "mlp_mult": 4,
        "pattern": "alternate",
    },
    "path": {"kind": "flow-linear"},
    "train_ae": {"steps": 2000, "lr": 3e-4, "batch": 2, "window": 4, "seed": 0,
                 "weight_decay": 0.0, "log_every": 25},
    "train_fm": {"steps": 2000, "lr": 3e-4, "batch": 4, "seed": 0, "k_steps": 10,
                 "spacing": "uniform-t", "weight_decay": 0.0, "log_every": 25},
    "train_ar": {"steps": 2000, "lr": 3e-4, "batch": 4, "seed": 0,
                 "weight_decay": 0.0, "log_every": 25},
    "rollout": {"horizon": 30, "ens": 1, "mode": "flow-euler", "seed": 0},
    "eval": {"horizons": [10, 30], "ens": 1, "seed": 0,
             "spectrum_centers": [10], "half_width": 2},
}

_PER_PROBLEM = {
    "heat2d": {
        "data": {"n_grid": 64, "t_steps": 120, "dt": 0.1, "n_train": 64,
                 "n_valid": 8, "n_test": 8, "seed": 0,
                 "param_range": [5e-4, 2e-3]},
        "codec": {"dim": 2, "in_channels": 1, "fine_grid": 64},
        "denoiser": {"dim": 2, "grid": 16, "channels": 8, "xi_dim": 1},
    },
    "burgers1d": {
        "data": {"n_grid": 64, "t_steps": 120, "dt": 0.04, "n_train": 64,
                 "n_valid": 8, "n_test": 8, "seed": 0,
                 "param_range": [0.05, 0.15], "substeps": 2},
        "codec": {"dim": 1, "in_channels": 1, "fine_grid": 64,
                  "latent_channels": 4, "hidden": 16},
        "denoiser": {"dim": 1, "grid": 16, "channels": 4, "xi_dim": 1,
                     "width": 48},
    },
    "vorticity2d": {
        "data": {"n_grid": 64, "t_steps": 72, "dt": 0.1, "n_train": 32,
                 "n_valid": 4, "n_test": 8, "seed": 0,
                 "param_range": [100.0, 400.0], "substeps": 8},
        "codec": {"dim": 2, "in_channels": 1, "fine_grid": 64},
        "denoiser": {"dim": 2, "grid": 16, "channels": 8, "xi_dim": 1},
    },
}


def default_config(problem: str) -> dict:
    if problem not in _PER_PROBLEM:
        raise ValueError(f"unknown problem {problem!r}, expected one of "
                         f"{sorted(_PER_PROBLEM)}")
    cfg = deepcopy(_COMMON)
    cfg["problem"] = problem
    for section, overrides in _PER_PROBLEM[problem].items():
        cfg.setdefault(section, {})
        cfg[section].update(deepcopy(overrides))
    return cfg


def _merge(base: dict, override: dict, path_: str = "") -> dict:
    out = deepcopy(base)
    for key, value in override.items():
        where = f"{path_}.{key}" if path_ else key
        if key not in base and path_:
            raise KeyError(f"unknown config key {where!r}")
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = deepcopy(value)
    return out


def load_config(path=None, problem: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults for the problem, overlaid with the JSON file and overrides."""
    user = {}
    if path is not None:
        user = json.loads(Path(path).read_text())
    problem = problem or user.get("problem") or "heat2d"
    cfg = default_config(problem)
    cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    cfg["problem"] = problem
    return cfg


def experiment_digest(cfg: dict) -> str:
    return config_digest(cfg)
