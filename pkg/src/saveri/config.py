"""Run configuration with paper-faithful defaults.

Everything an end-to-end run needs is collected here and written verbatim
into each model bundle, so results are reproducible from the bundle alone.
"""

from __future__ import annotations

import copy
from typing import Any, Optional

from . import jsonio

DEFAULTS: dict[str, Any] = {
    "system": {
        "name": "point-mass",
        "params": {},           # overrides for the system's parameter set
    },
    "data": {
        "T": 60,                # planning horizon (steps)
        "H": 10,                # safety assessment horizon
        "gamma": 0.99,          # unsafety-score discount
        "stride": 1,            # segment stride (sliding window)
    },
    "metric": {
        "delta_lambda": 0.01,   # weight of the score term in the distance
        "save_matrix": True,    # keep distances.bin in the bundle
    },
    "embedding": {
        "n_y": 2,
        "perplexity": 30.0,
        "iterations": 1000,
        "learning_rate": 200.0,
        "exaggeration": 12.0,
        "exaggeration_iters": 250,
        "momentum_start": 0.5,
        "momentum_final": 0.8,
        "momentum_switch": 250,
    },
    "network": {
        "hidden": [64, 64],
        "activation": "tanh",
        "learning_rate": 1e-3,
        "batch_size": 64,
        "epochs": 300,
    },
    "grid": {
        "cells": [14, 14],
        "expand": 0.05,
        "cell_length": None,    # derived from the embedding extent unless set
    },
    "belief": {
        "mu_ini": 0.3,
        "k_min": 5,
    },
    "adapt": {
        "sigma_thre": 0.3,
        "mu_min": 0.1,
        "alpha": 0.4,
        "beta": 0.3,
        "k_u": 40,
        "decay_scope": "global",
        "gp_signal_var": 0.25,
        "gp_lengthscale": None,  # default: 0.1 * grid bounding-box diagonal
        "gp_noise": 1e-4,
        "gp_capacity": 2000,
        "gp_optimize": False,
    },
    "run": {
        "threshold": 0.6,       # receding-horizon trigger threshold
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def merge_config(base: dict, override: Optional[dict]) -> dict:
    """Recursive merge; override wins, unknown keys rejected."""
    out = copy.deepcopy(base)
    if not override:
        return out
    for key, val in override.items():
        if key not in out:
            raise KeyError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(val, dict) and key != "params":
            out[key] = merge_config(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: Optional[str]) -> dict:
    cfg = default_config()
    if path:
        cfg = merge_config(cfg, jsonio.load_file(path))
    return cfg


def config_hash(cfg: dict) -> str:
    return jsonio.sha256_of_text(jsonio.dumps(cfg))
