"""On-disk model bundle: a directory with the five model files.

config.json  — full run configuration (all hyperparameters)
mlp.json     — mapping network weights and standardization
grid.json    — grid spec, member tables and per-cell BBAs
gpr.json     — discrepancy-GP training data and hyperparameters
meta.json    — versions, seeds, dataset digest, config hash

Loading then saving reproduces the files byte for byte; the config hash is
verified on load so a bundle cannot silently run with edited settings.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import jsonio
from .adapt import DiscrepancyGP, _factorize
from .belief import GridModel, GridSpec, EMPTY_BBA
from .config import config_hash
from .embedding import MappingNetwork

FORMAT_VERSION = 1


class BundleError(RuntimeError):
    pass


@dataclass
class ModelBundle:
    config: dict
    net: MappingNetwork
    grid: GridModel
    gp: Optional[DiscrepancyGP]
    meta: dict

    def assess_input(self, x):
        from .belief import assess
        return assess(self.grid, self.net, np.asarray(x, dtype=float))


def _grid_to_dict(g: GridModel) -> dict:
    return {
        "spec": g.spec.to_dict(),
        "training": {
            "y": g.train_y,
            "lambda": g.train_lambda,
            "mu": g.train_mu,
        },
        "feedback": {
            "y": g.feedback_y,
            "lambda_bar": g.feedback_lambda,
        },
        "n_f": g.n_f,
        "cells": {
            "prior": g.prior,
            "feedback": g.feedback,
            "combined": g.combined,
            "k_tilde": g.k_tilde,
            "k_bar": g.k_bar,
        },
    }


def _grid_from_dict(d: dict, net: Optional[MappingNetwork]) -> GridModel:
    from .belief import locate_many
    spec = GridSpec.from_dict(d["spec"])
    train_y = np.asarray(d["training"]["y"], dtype=float).reshape(-1, 2)
    fb_y = np.asarray(d["feedback"]["y"], dtype=float).reshape(-1, 2)
    train_cell, _ = locate_many(spec, train_y) if len(train_y) else (
        np.zeros(0, dtype=int), np.zeros(0, dtype=bool))
    fb_cell, _ = locate_many(spec, fb_y) if len(fb_y) else (
        np.zeros(0, dtype=int), np.zeros(0, dtype=bool))
    cells = d["cells"]
    return GridModel(
        spec=spec,
        train_y=train_y,
        train_lambda=np.asarray(d["training"]["lambda"], dtype=float),
        train_mu=np.asarray(d["training"]["mu"], dtype=float),
        train_cell=train_cell,
        prior=np.asarray(cells["prior"], dtype=float).reshape(-1, 3),
        feedback=np.asarray(cells["feedback"], dtype=float).reshape(-1, 3),
        combined=np.asarray(cells["combined"], dtype=float).reshape(-1, 3),
        k_tilde=np.asarray(cells["k_tilde"], dtype=int),
        k_bar=np.asarray(cells["k_bar"], dtype=int),
        feedback_y=fb_y,
        feedback_lambda=np.asarray(d["feedback"]["lambda_bar"], dtype=float),
        feedback_cell=fb_cell,
        n_f=int(d["n_f"]),
        net=net,
    )


def _gp_to_dict(gp: Optional[DiscrepancyGP]) -> dict:
    if gp is None:
        return {"inputs": [], "targets": [], "signal_var": None,
                "lengthscale": None, "noise": None}
    return {"inputs": gp.inputs, "targets": gp.targets,
            "signal_var": gp.signal_var, "lengthscale": gp.lengthscale,
            "noise": gp.noise}


def _gp_from_dict(d: dict) -> Optional[DiscrepancyGP]:
    if not d["inputs"]:
        return None
    gp = DiscrepancyGP(
        inputs=np.asarray(d["inputs"], dtype=float),
        targets=np.asarray(d["targets"], dtype=float),
        signal_var=float(d["signal_var"]),
        lengthscale=float(d["lengthscale"]),
        noise=float(d["noise"]))
    return _factorize(gp)


def save_bundle(bundle: ModelBundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dict(bundle.meta)
    meta["format_version"] = FORMAT_VERSION
    meta["config_hash"] = config_hash(bundle.config)
    jsonio.dump_file(bundle.config, path / "config.json")
    jsonio.dump_file(bundle.net.to_dict(), path / "mlp.json")
    jsonio.dump_file(_grid_to_dict(bundle.grid), path / "grid.json")
    jsonio.dump_file(_gp_to_dict(bundle.gp), path / "gpr.json")
    jsonio.dump_file(meta, path / "meta.json")


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    for name in ("config.json", "mlp.json", "grid.json", "gpr.json", "meta.json"):
        if not (path / name).exists():
            raise BundleError(f"bundle at {path} is missing {name}")
    config = jsonio.load_file(path / "config.json")
    meta = jsonio.load_file(path / "meta.json")
    if meta.get("config_hash") != config_hash(config):
        raise BundleError(
            f"bundle at {path}: config.json does not match the hash in meta.json")
    net = MappingNetwork.from_dict(jsonio.load_file(path / "mlp.json"))
    grid = _grid_from_dict(jsonio.load_file(path / "grid.json"), net)
    gp = _gp_from_dict(jsonio.load_file(path / "gpr.json"))
    return ModelBundle(config=config, net=net, grid=grid, gp=gp, meta=meta)
