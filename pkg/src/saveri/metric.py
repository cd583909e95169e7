"""Dynamic time warping and the safety-aware pairwise distance matrix.

The distance between two training data combines their error-sequence DTW
(normalized by the maximum pairwise DTW) with the absolute difference of
their unsafety scores. DTW here is the classic full-window dynamic program
with Euclidean local cost and match/insert/delete steps; it is not a metric
(the triangle inequality can fail), which downstream code must not assume.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

Array = np.ndarray

_MAGIC = b"SAFDIST1"


def dtw(a: Sequence, b: Sequence) -> float:
    """Minimal accumulated Euclidean cost over all monotone alignments.

    Sequences may be given as (length,) scalar series or (length, dim)
    arrays of vectors.
    """
    a = _as_sequence(np.asarray(a, dtype=float))
    b = _as_sequence(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw requires non-empty sequences")
    if a.shape[1] != b.shape[1]:
        raise ValueError("dtw sequences must share vector dimension")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    la, lb = cost.shape
    D = np.empty((la, lb))
    D[0, 0] = cost[0, 0]
    for j in range(1, lb):
        D[0, j] = D[0, j - 1] + cost[0, j]
    for i in range(1, la):
        D[i, 0] = D[i - 1, 0] + cost[i, 0]
        for j in range(1, lb):
            D[i, j] = cost[i, j] + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return float(D[-1, -1])


def _as_sequence(x: Array) -> Array:
    if x.ndim == 1:
        return x[:, None]
    if x.ndim != 2:
        raise ValueError("dtw sequences must be 1- or 2-dimensional arrays")
    return x


@dataclass
class DistanceMatrix:
    values: Array   # (n, n) symmetric, zero diagonal
    w_max: float    # maximum raw pairwise DTW used for normalization

    @property
    def n(self) -> int:
        return len(self.values)


def _pairwise_dtw_flat(E: Array, ii: Array, jj: Array) -> Array:
    """DTW for the pairs (ii[k], jj[k]) of equal-length sequences E, computed
    as a vectorized wavefront over all pairs at once."""
    n_pairs = len(ii)
    H = E.shape[1]
    out = np.empty(n_pairs)
    chunk = max(1, int(2**24 // max(1, H * H)))  # ~128 MB of f64 workspace
    for lo in range(0, n_pairs, chunk):
        hi = min(lo + chunk, n_pairs)
        A = E[ii[lo:hi]]
        B = E[jj[lo:hi]]
        cost = np.linalg.norm(A[:, :, None, :] - B[:, None, :, :], axis=3)
        D = np.empty_like(cost)
        D[:, 0, 0] = cost[:, 0, 0]
        for j in range(1, H):
            D[:, 0, j] = D[:, 0, j - 1] + cost[:, 0, j]
        for i in range(1, H):
            D[:, i, 0] = D[:, i - 1, 0] + cost[:, i, 0]
            for j in range(1, H):
                np.minimum(D[:, i - 1, j], D[:, i, j - 1], out=D[:, i, j])
                np.minimum(D[:, i, j], D[:, i - 1, j - 1], out=D[:, i, j])
                D[:, i, j] += cost[:, i, j]
        out[lo:hi] = D[:, -1, -1]
    return out


def max_threads() -> int:
    """Parallelism cap from SAVERI_THREADS (currently informational; the
    pairwise computation is already vectorized)."""
    try:
        return max(1, int(os.environ.get("SAVERI_THREADS", "1")))
    except ValueError:
        return 1


def distance_matrix(data, delta_lambda: float) -> DistanceMatrix:
    """Pairwise distances dtw(e_i, e_j)/w_max + delta_lambda*|lam_i - lam_j|.

    Accepts a sequence of TrainingDatum or a pair of arrays (errors, scores)
    with errors shaped (n, H, n_z). With all-identical error sequences
    (w_max = 0) the DTW term is defined as 0 and a warning is emitted.
    """
    if isinstance(data, tuple):
        E, lam = data
        E = np.asarray(E, dtype=float)
        lam = np.asarray(lam, dtype=float)
    else:
        from .dataset import error_sequences, scores
        E = error_sequences(data)
        lam = scores(data)
    n = len(E)
    if n < 2:
        raise ValueError("distance matrix needs at least 2 data")

    ii, jj = np.triu_indices(n, k=1)
    raw = _pairwise_dtw_flat(E, ii, jj)
    w_max = float(raw.max()) if len(raw) else 0.0

    values = np.zeros((n, n))
    if w_max > 0.0:
        norm = raw / w_max
    else:
        logger.warning("all error sequences identical (w_max = 0); "
                       "DTW term of the distance is 0")
        norm = np.zeros_like(raw)
    norm = norm + delta_lambda * np.abs(lam[ii] - lam[jj])
    values[ii, jj] = norm
    values[jj, ii] = norm
    return DistanceMatrix(values=values, w_max=w_max)


def save_distance_matrix(dist: DistanceMatrix, path) -> None:
    """Binary export: 16-byte header (magic, u32 n, u32 reserved), then
    row-major little-endian float64 values."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", dist.n, 0))
        f.write(np.ascontiguousarray(dist.values, dtype="<f8").tobytes())


def load_distance_matrix(path) -> Array:
    """Read back the (already normalized) matrix; w_max is not stored."""
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:8] != _MAGIC:
            raise ValueError(f"{path}: not a distance-matrix file (bad magic)")
        n, _ = struct.unpack("<II", header[8:])
        buf = f.read(n * n * 8)
    if len(buf) != n * n * 8:
        raise ValueError(f"{path}: truncated distance-matrix payload")
    return np.frombuffer(buf, dtype="<f8").reshape(n, n).copy()
