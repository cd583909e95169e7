"""Belief-mass algebra over safe/unsafe outcomes and the grid-cell model.

Each basic belief assignment (BBA) is a triple (b_safe, b_unsafe, mu) on the
events "stays safe within the horizon", "becomes unsafe", and residual
uncertainty, summing to one. The empty assignment (0, 0, 1) means no
estimate can be made.

The fusion operator F combines member BBAs of a cell. Writing
w_i = (1 - mu_i)/mu_i, the operator reduces algebraically to

    b_safe   = sum(w_i * b_safe_i) / sum(w_i)
    b_unsafe = sum(w_i * b_unsafe_i) / sum(w_i)
    mu       = sum(1 - mu_i) / sum(w_i)

which is exactly the published product form after dividing numerator and
denominator by prod(mu_i), but free of the underflow the products hit for
large member counts. Member uncertainties are clamped away from zero (and
the member renormalized) so the weights stay finite; members with mu = 1
drop out, making the empty BBA the identity element.

The feedback operator G averages zero-uncertainty member masses and assigns
the cell an uncertainty beta * exp(-alpha * (count - 1)) that decays with
the amount of feedback received.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .embedding import MappingNetwork, map_input

Array = np.ndarray

#: smallest member uncertainty used inside fusion. Any positive value keeps
#: the reformulated operator finite; this one is small enough not to disturb
#: idempotence or convergence checks at 1e-12 tolerances.
FUSION_MU_FLOOR = 1e-15

_SUM_TOL = 1e-9


@dataclass(frozen=True)
class BBA:
    b_safe: float
    b_unsafe: float
    mu: float

    def __post_init__(self):
        for name, v in (("b_safe", self.b_safe), ("b_unsafe", self.b_unsafe),
                        ("mu", self.mu)):
            if not (-_SUM_TOL <= v <= 1.0 + _SUM_TOL):
                raise ValueError(f"BBA component {name}={v} outside [0, 1]")
        s = self.b_safe + self.b_unsafe + self.mu
        if abs(s - 1.0) > _SUM_TOL:
            raise ValueError(f"BBA masses sum to {s}, expected 1")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.b_safe, self.b_unsafe, self.mu)

    def is_empty(self) -> bool:
        return self == EMPTY_BBA


EMPTY_BBA = BBA(0.0, 0.0, 1.0)


def bba_from_training(lam: float, mu: float) -> BBA:
    """Belief assignment for a training datum with unsafety score lam and
    model-confidence uncertainty mu."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"unsafety score {lam} outside [0, 1]")
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"uncertainty {mu} outside [0, 1]")
    return BBA((1.0 - mu) * (1.0 - lam), (1.0 - mu) * lam, mu)


def bba_from_feedback(lam: float) -> BBA:
    """Zero-uncertainty assignment for a feedback datum from the real system."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"unsafety score {lam} outside [0, 1]")
    return BBA(1.0 - lam, lam, 0.0)


def _fuse_masses(b_safe: Array, b_unsafe: Array, mu: Array
                 ) -> tuple[float, float, float]:
    """Stable form of the F operator on parallel mass arrays."""
    # canonical ordering makes the floating-point reduction permutation-proof
    order = np.lexsort((b_unsafe, b_safe, mu))
    b_safe, b_unsafe, mu = b_safe[order], b_unsafe[order], mu[order]

    low = mu < FUSION_MU_FLOOR
    if np.any(low):
        b_sum = b_safe[low] + b_unsafe[low]
        scale = (1.0 - FUSION_MU_FLOOR) / b_sum
        b_safe = b_safe.copy()
        b_unsafe = b_unsafe.copy()
        mu = mu.copy()
        b_safe[low] *= scale
        b_unsafe[low] *= scale
        mu[low] = FUSION_MU_FLOOR

    w = (1.0 - mu) / mu
    denom = w.sum()
    if denom <= 0.0:  # every member is (0, 0, 1): no estimate possible
        return EMPTY_BBA.as_tuple()
    return (float((w * b_safe).sum() / denom),
            float((w * b_unsafe).sum() / denom),
            float((1.0 - mu).sum() / denom))


def fuse_F(bbas: Iterable[BBA]) -> BBA:
    """Fuse a non-empty collection of member BBAs into a cell BBA."""
    members = list(bbas)
    if not members:
        raise ValueError("fuse_F requires at least one member")
    b_s = np.array([m.b_safe for m in members])
    b_u = np.array([m.b_unsafe for m in members])
    mu = np.array([m.mu for m in members])
    s, u, m = _fuse_masses(b_s, b_u, mu)
    return BBA(min(max(s, 0.0), 1.0), min(max(u, 0.0), 1.0), min(max(m, 0.0), 1.0))


def fuse_G(members: Sequence[BBA], count_for_decay: int, alpha: float,
           beta: float) -> BBA:
    """Average zero-uncertainty feedback BBAs with decaying cell uncertainty."""
    if len(members) == 0:
        raise ValueError("fuse_G requires at least one member")
    if count_for_decay < 1:
        raise ValueError("count_for_decay must be >= 1")
    mu_v = beta * math.exp(-alpha * (count_for_decay - 1))
    b_s = float(np.sort(np.array([m.b_safe for m in members])).sum()) / len(members)
    b_u = float(np.sort(np.array([m.b_unsafe for m in members])).sum()) / len(members)
    return BBA((1.0 - mu_v) * b_s, (1.0 - mu_v) * b_u, mu_v)


def combine(prior: BBA, feedback: BBA) -> BBA:
    """Cell BBA from prior and feedback estimates: fuse unless the feedback
    estimate is empty, in which case the prior stands alone."""
    if feedback.is_empty():
        return prior
    return fuse_F([prior, feedback])


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float]
    cell_length: float
    shape: tuple[int, int]

    def __post_init__(self):
        if self.cell_length <= 0:
            raise ValueError("cell length must be positive")
        if self.shape[0] < 1 or self.shape[1] < 1:
            raise ValueError("grid must have at least one cell per axis")

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "cell_length": self.cell_length,
                "shape": list(self.shape)}

    @staticmethod
    def from_dict(d: dict) -> "GridSpec":
        return GridSpec(tuple(d["origin"]), float(d["cell_length"]),
                        tuple(d["shape"]))

    @staticmethod
    def from_points(points: Array, shape: tuple[int, int] = (14, 14),
                    expand: float = 0.05,
                    cell_length: Optional[float] = None) -> "GridSpec":
        """Square-celled grid covering the bounding box of the points,
        expanded by ``expand`` per side. Unless fixed, the cell length is
        derived from the larger expanded extent."""
        points = np.asarray(points, dtype=float)
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        center = 0.5 * (lo + hi)
        extent = np.maximum((hi - lo) * (1.0 + 2.0 * expand), 1e-6)
        if cell_length is None:
            cell_length = float(max(extent[0] / shape[0], extent[1] / shape[1]))
        origin = (float(center[0] - 0.5 * shape[0] * cell_length),
                  float(center[1] - 0.5 * shape[1] * cell_length))
        return GridSpec(origin, float(cell_length), tuple(shape))


def locate(spec: GridSpec, y: Array) -> tuple[tuple[int, int], bool]:
    """Cell index of an embedding point; outside points clamp to the nearest
    boundary cell and raise the out-of-grid flag."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("cannot locate a non-finite point")
    raw = np.floor((y - np.asarray(spec.origin)) / spec.cell_length).astype(int)
    clamped = np.clip(raw, 0, np.asarray(spec.shape) - 1)
    return (int(clamped[0]), int(clamped[1])), bool(np.any(raw != clamped))


def locate_many(spec: GridSpec, Y: Array) -> tuple[Array, Array]:
    """Vectorized locate: returns (flat cell indices, out-of-grid flags)."""
    Y = np.asarray(Y, dtype=float)
    raw = np.floor((Y - np.asarray(spec.origin)) / spec.cell_length).astype(int)
    clamped = np.clip(raw, 0, np.asarray(spec.shape) - 1)
    out = np.any(raw != clamped, axis=1)
    flat = clamped[:, 0] * spec.shape[1] + clamped[:, 1]
    return flat, out


def prior_estimate(cell_members: Sequence[Sequence[BBA]], k_min: int) -> list[BBA]:
    """Per-cell prior BBAs: fuse members where the cell holds at least k_min
    of them, empty BBA otherwise."""
    out = []
    for members in cell_members:
        if len(members) >= k_min:
            out.append(fuse_F(members))
        else:
            out.append(EMPTY_BBA)
    return out


@dataclass
class GridModel:
    """Grid discretization of the embedding space with per-cell prior,
    feedback and combined BBAs plus the member bookkeeping needed to
    recompute them.

    Updates replace whole arrays and are published by swapping in the new
    model object, so concurrent readers never observe a half-updated grid.
    """

    spec: GridSpec
    train_y: Array          # (n_t, n_y) embedding coordinates
    train_lambda: Array     # (n_t,) unsafety scores
    train_mu: Array         # (n_t,) current per-datum uncertainties
    train_cell: Array       # (n_t,) flat cell index
    prior: Array            # (n_cells, 3)
    feedback: Array         # (n_cells, 3)
    combined: Array         # (n_cells, 3)
    k_tilde: Array          # (n_cells,) training members per cell
    k_bar: Array            # (n_cells,) feedback members per cell
    feedback_y: Array = field(default_factory=lambda: np.zeros((0, 2)))
    feedback_lambda: Array = field(default_factory=lambda: np.zeros(0))
    feedback_cell: Array = field(default_factory=lambda: np.zeros(0, dtype=int))
    n_f: int = 0
    net: Optional[MappingNetwork] = None

    @property
    def n_cells(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.spec.shape

    def cell_bba(self, ix: int, iy: int) -> BBA:
        b = self.combined[ix * self.shape[1] + iy]
        return BBA(float(b[0]), float(b[1]), float(b[2]))


def build_grid_model(train_y: Array, train_lambda: Array, mu_ini: float,
                     k_min: int, spec: Optional[GridSpec] = None,
                     grid_shape: tuple[int, int] = (14, 14),
                     expand: float = 0.05,
                     cell_length: Optional[float] = None,
                     net: Optional[MappingNetwork] = None) -> GridModel:
    """Offline initialization: locate the embedded training data, assign
    per-datum BBAs with uncertainty mu_ini and fuse per-cell priors."""
    train_y = np.asarray(train_y, dtype=float)
    train_lambda = np.asarray(train_lambda, dtype=float)
    if spec is None:
        spec = GridSpec.from_points(train_y, grid_shape, expand, cell_length)
    cells, _ = locate_many(spec, train_y)
    n_cells = spec.shape[0] * spec.shape[1]
    model = GridModel(
        spec=spec, train_y=train_y, train_lambda=train_lambda,
        train_mu=np.full(len(train_y), mu_ini), train_cell=cells,
        prior=np.tile(EMPTY_BBA.as_tuple(), (n_cells, 1)),
        feedback=np.tile(EMPTY_BBA.as_tuple(), (n_cells, 1)),
        combined=np.tile(EMPTY_BBA.as_tuple(), (n_cells, 1)),
        k_tilde=np.bincount(cells, minlength=n_cells),
        k_bar=np.zeros(n_cells, dtype=int),
        net=net,
    )
    recompute_prior(model, k_min)
    recompute_combined(model)
    return model


def recompute_prior(model: GridModel, k_min: int) -> None:
    """Refresh every cell's prior from the current per-datum uncertainties."""
    b_safe = (1.0 - model.train_mu) * (1.0 - model.train_lambda)
    b_unsafe = (1.0 - model.train_mu) * model.train_lambda
    prior = np.tile(EMPTY_BBA.as_tuple(), (model.n_cells, 1))
    order = np.argsort(model.train_cell, kind="stable")
    cells_sorted = model.train_cell[order]
    bounds = np.searchsorted(cells_sorted, np.arange(model.n_cells + 1))
    for c in range(model.n_cells):
        lo, hi = bounds[c], bounds[c + 1]
        if hi - lo >= k_min:
            idx = order[lo:hi]
            prior[c] = _fuse_masses(b_safe[idx], b_unsafe[idx],
                                    model.train_mu[idx])
    model.prior = prior


def recompute_feedback(model: GridModel, alpha: float, beta: float,
                       decay_scope: str = "global") -> None:
    """Refresh every cell's feedback estimate via the G operator. The decay
    count is the global number of feedback data by default, or the per-cell
    member count with decay_scope='per-cell'."""
    fb = np.tile(EMPTY_BBA.as_tuple(), (model.n_cells, 1))
    k_bar = np.bincount(model.feedback_cell, minlength=model.n_cells)
    if model.n_f > 0:
        b_safe_sum = np.bincount(model.feedback_cell,
                                 weights=1.0 - model.feedback_lambda,
                                 minlength=model.n_cells)
        b_unsafe_sum = np.bincount(model.feedback_cell,
                                   weights=model.feedback_lambda,
                                   minlength=model.n_cells)
        occupied = np.flatnonzero(k_bar > 0)
        for c in occupied:
            count = int(k_bar[c]) if decay_scope == "per-cell" else model.n_f
            mu_v = beta * math.exp(-alpha * (count - 1))
            fb[c, 0] = (1.0 - mu_v) * b_safe_sum[c] / k_bar[c]
            fb[c, 1] = (1.0 - mu_v) * b_unsafe_sum[c] / k_bar[c]
            fb[c, 2] = mu_v
    model.feedback = fb
    model.k_bar = k_bar


def recompute_combined(model: GridModel) -> None:
    combined = model.prior.copy()
    for c in np.flatnonzero(model.k_bar > 0):
        combined[c] = _fuse_masses(
            np.array([model.prior[c, 0], model.feedback[c, 0]]),
            np.array([model.prior[c, 1], model.feedback[c, 1]]),
            np.array([model.prior[c, 2], model.feedback[c, 2]]))
    model.combined = combined


@dataclass
class Assessment:
    gamma: float
    bba: BBA
    cell: tuple[int, int]
    out_of_grid: bool
    no_estimate: bool

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "b_safe": self.bba.b_safe,
                "b_unsafe": self.bba.b_unsafe, "mu": self.bba.mu,
                "cell": list(self.cell), "out_of_grid": self.out_of_grid,
                "no_estimate": self.no_estimate}


def assess(model: GridModel, net: Optional[MappingNetwork],
           x: Array) -> Assessment:
    """Safety assessment of one input: embed, locate, read the cell BBA.

    Returns the safe-belief mass as the predicted safety probability. An
    unpopulated cell yields 0 with full uncertainty and the no-estimate flag
    raised: a missing estimate must never read as safe.
    """
    net = net or model.net
    if net is None:
        raise ValueError("no mapping network available for assessment")
    y = map_input(net, np.asarray(x, dtype=float))
    (ix, iy), out = locate(model.spec, y)
    bba = model.cell_bba(ix, iy)
    return Assessment(gamma=bba.b_safe, bba=bba, cell=(ix, iy),
                      out_of_grid=out, no_estimate=bba.is_empty())


def grid_csv(model: GridModel) -> str:
    """Combined-cell export with one row per cell for heatmap rendering."""
    lines = ["ix,iy,b_safe,b_unsafe,mu,k_tilde,k_bar"]
    nx, ny = model.shape
    for ix in range(nx):
        for iy in range(ny):
            c = ix * ny + iy
            b = model.combined[c]
            lines.append(
                f"{ix},{iy},{b[0]:.17g},{b[1]:.17g},{b[2]:.17g},"
                f"{int(model.k_tilde[c])},{int(model.k_bar[c])}")
    return "\n".join(lines) + "\n"
