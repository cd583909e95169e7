"""Online adaptation: discrepancy regression and grid updates.

Feedback data quantify the sim-to-real gap as the absolute difference
between the real and nominal-replay unsafety scores of a segment. A
Gaussian-process regression over the embedding space predicts that gap for
the offline training data: where the prediction is confident, each training
datum's uncertainty is rewritten from its initial value to
mu_min + m*(1 - mu_min), after which the per-cell priors, feedback
estimates and combined estimates are recomputed and published atomically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import belief
from .belief import GridModel
from .dataset import FeedbackDatum

Array = np.ndarray
logger = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    sigma_thre: float = 0.3
    mu_min: float = 0.1
    mu_ini: float = 0.3
    alpha: float = 0.4
    beta: float = 0.3
    k_u: int = 40
    k_min: int = 5
    decay_scope: str = "global"      # or "per-cell"
    gp_signal_var: float = 0.25
    gp_lengthscale: Optional[float] = None  # default: 0.1 * bbox diagonal
    gp_noise: float = 1e-4
    gp_capacity: int = 2000
    gp_optimize: bool = False

    def __post_init__(self):
        if not self.mu_min < self.mu_ini:
            raise ValueError("mu_min must be smaller than mu_ini")
        if self.decay_scope not in ("global", "per-cell"):
            raise ValueError("decay_scope must be 'global' or 'per-cell'")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DiscrepancyGP:
    """Exact GPR with a squared-exponential kernel and zero prior mean."""

    inputs: Array                # (n, d)
    targets: Array               # (n,) in [0, 1]
    signal_var: float
    lengthscale: float
    noise: float
    _chol: Array = field(repr=False, default=None)
    _alpha: Array = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return len(self.inputs)

    def kernel(self, A: Array, B: Array) -> Array:
        d2 = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
        return self.signal_var * np.exp(-0.5 * d2 / self.lengthscale ** 2)


def _log_marginal_likelihood(gp: DiscrepancyGP) -> float:
    n = gp.n
    return float(-0.5 * gp.targets @ gp._alpha
                 - np.log(np.diag(gp._chol)).sum()
                 - 0.5 * n * math.log(2.0 * math.pi))


def _factorize(gp: DiscrepancyGP) -> DiscrepancyGP:
    K = gp.kernel(gp.inputs, gp.inputs)
    jitter = 0.0
    while True:
        try:
            L = np.linalg.cholesky(K + (gp.noise + jitter) * np.eye(gp.n))
            break
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-6:
                raise RuntimeError(
                    "GP kernel matrix not positive definite even with jitter 1e-6")
    gp._chol = L
    gp._alpha = np.linalg.solve(L.T, np.linalg.solve(L, gp.targets))
    return gp


def gpr_fit(inputs: Array, targets: Array, *,
            signal_var: float = 0.25, lengthscale: Optional[float] = None,
            noise: float = 1e-4, optimize: bool = False) -> DiscrepancyGP:
    """Fit the discrepancy GP. The default length scale is a tenth of the
    input bounding-box diagonal; an optional grid search maximizes the log
    marginal likelihood over a small hyperparameter grid."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if len(X) != len(y) or len(y) == 0:
        raise ValueError("need equal, non-zero numbers of inputs and targets")
    if np.any(y < -1e-12) or np.any(y > 1.0 + 1e-12):
        raise ValueError("GP targets must lie in [0, 1]")
    if lengthscale is None:
        span = X.max(axis=0) - X.min(axis=0)
        diag = float(np.linalg.norm(span))
        lengthscale = 0.1 * diag if diag > 0 else 1.0

    if not optimize:
        return _factorize(DiscrepancyGP(X, y, signal_var, lengthscale, noise))

    best, best_lml = None, -np.inf
    for ls_mult in (0.25, 0.5, 1.0, 2.0, 4.0):
        for sv in (0.5 * signal_var, signal_var, 2.0 * signal_var):
            gp = _factorize(DiscrepancyGP(X, y, sv, ls_mult * lengthscale, noise))
            lml = _log_marginal_likelihood(gp)
            if lml > best_lml:
                best, best_lml = gp, lml
    return best


def gpr_predict(gp: DiscrepancyGP, points: Array) -> tuple[Array, Array]:
    """Posterior mean (clamped to [0, 1]) and standard deviation."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    Ks = gp.kernel(gp.inputs, P)                       # (n, m)
    mean = Ks.T @ gp._alpha
    v = np.linalg.solve(gp._chol, Ks)                  # (n, m)
    var = gp.signal_var - (v * v).sum(axis=0)
    std = np.sqrt(np.maximum(var, 0.0))
    return np.clip(mean, 0.0, 1.0), std


def update_training_uncertainty(model: GridModel, gp: DiscrepancyGP,
                                cfg: AdaptConfig) -> tuple[Array, int]:
    """New per-datum uncertainties from the GP's gap prediction.

    Where the posterior is confident (std <= sigma_thre) the uncertainty
    becomes mu_min + m*(1 - mu_min); elsewhere it stays at mu_ini. Returns
    (mu array, number of gated data).
    """
    mean, std = gpr_predict(gp, model.train_y)
    gated = std <= cfg.sigma_thre
    mu = np.where(gated, cfg.mu_min + mean * (1.0 - cfg.mu_min), cfg.mu_ini)
    return mu, int(gated.sum())


@dataclass
class AdaptationLogEntry:
    n_f: int
    gp_n: int
    gp_lengthscale: float
    gp_signal_var: float
    gp_noise: float
    reweighted: int
    cell_deltas: list  # [ix, iy, delta_b_safe] for |delta| > 0.05

    def to_dict(self) -> dict:
        return {"n_f": self.n_f, "gp": {"n": self.gp_n,
                                        "lengthscale": self.gp_lengthscale,
                                        "signal_var": self.gp_signal_var,
                                        "noise": self.gp_noise},
                "reweighted": self.reweighted,
                "cell_deltas": self.cell_deltas}


def adaptation_step(model: GridModel, gp: Optional[DiscrepancyGP],
                    batch: Sequence[FeedbackDatum], cfg: AdaptConfig
                    ) -> tuple[GridModel, Optional[DiscrepancyGP],
                               Optional[AdaptationLogEntry]]:
    """Consume one batch of feedback data and republish the grid.

    Returns the updated (model, gp, log entry); the input model is left
    untouched so readers can keep using it until the swap. An empty batch
    returns the inputs unchanged.
    """
    if len(batch) == 0:
        return model, gp, None
    if model.net is None:
        raise ValueError("grid model has no mapping network attached")

    inputs = np.asarray([d.segment.flat_input() for d in batch])
    Y = model.net.forward(inputs)
    finite = np.all(np.isfinite(Y), axis=1)
    if not np.all(finite):
        logger.warning("skipping %d feedback data with non-finite embeddings",
                       int((~finite).sum()))
        Y = Y[finite]
        batch = [d for d, ok in zip(batch, finite) if ok]
        if len(batch) == 0:
            return model, gp, None
    lam_real = np.array([d.score_real for d in batch])
    targets = np.abs(lam_real - np.array([d.score_nominal for d in batch]))

    # 1) grow and refit the discrepancy GP (oldest data drop past capacity)
    if gp is None:
        gp_X, gp_y = Y, targets
    else:
        gp_X = np.vstack([gp.inputs, Y])
        gp_y = np.concatenate([gp.targets, targets])
    if len(gp_y) > cfg.gp_capacity:
        logger.warning("GP training set capped at %d (dropping oldest %d)",
                       cfg.gp_capacity, len(gp_y) - cfg.gp_capacity)
        gp_X = gp_X[-cfg.gp_capacity:]
        gp_y = gp_y[-cfg.gp_capacity:]
    lengthscale = cfg.gp_lengthscale
    if lengthscale is None:
        nx, ny = model.spec.shape
        lengthscale = 0.1 * model.spec.cell_length * math.hypot(nx, ny)
    gp = gpr_fit(gp_X, gp_y, signal_var=cfg.gp_signal_var,
                 lengthscale=lengthscale, noise=cfg.gp_noise,
                 optimize=cfg.gp_optimize)

    # 2..4) rebuild the grid on a copy and publish it whole
    new = replace(
        model,
        train_mu=model.train_mu.copy(),
        prior=model.prior.copy(), feedback=model.feedback.copy(),
        combined=model.combined.copy(), k_bar=model.k_bar.copy(),
        feedback_y=np.vstack([model.feedback_y, Y]) if model.n_f else Y.copy(),
        feedback_lambda=np.concatenate([model.feedback_lambda, lam_real])
        if model.n_f else lam_real.copy(),
        n_f=model.n_f + len(batch),
    )
    cells, _ = belief.locate_many(new.spec, Y)
    new.feedback_cell = (np.concatenate([model.feedback_cell, cells])
                         if model.n_f else cells)

    new.train_mu, reweighted = update_training_uncertainty(new, gp, cfg)
    belief.recompute_prior(new, cfg.k_min)
    belief.recompute_feedback(new, cfg.alpha, cfg.beta, cfg.decay_scope)
    belief.recompute_combined(new)

    delta = new.combined[:, 0] - model.combined[:, 0]
    ny = model.spec.shape[1]
    deltas = [[int(c // ny), int(c % ny), float(delta[c])]
              for c in np.flatnonzero(np.abs(delta) > 0.05)]
    entry = AdaptationLogEntry(
        n_f=new.n_f, gp_n=gp.n, gp_lengthscale=gp.lengthscale,
        gp_signal_var=gp.signal_var, gp_noise=gp.noise,
        reweighted=reweighted, cell_deltas=deltas)
    return new, gp, entry
