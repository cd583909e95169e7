"""Low-dimensional embedding of training data and the out-of-sample map.

The embedding is exact t-SNE driven directly by the precomputed pairwise
distance matrix: per-point Gaussian kernels on the matrix rows (bandwidths
tuned by binary search to hit the target perplexity), symmetrized joint
probabilities, Student-t low-dimensional affinities and plain gradient
descent with momentum, gains and early exaggeration.

A small fully connected network is then regressed onto the embedding so
that unseen inputs can be mapped into the same space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

Array = np.ndarray
logger = logging.getLogger(__name__)


class EmbeddingError(RuntimeError):
    pass


@dataclass
class EmbeddingConfig:
    n_y: int = 2
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_start: float = 0.5
    momentum_final: float = 0.8
    momentum_switch: int = 250
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EmbeddedSet:
    coordinates: Array          # (n, n_y)
    kl: float                   # final KL divergence
    kl_exaggeration_end: float  # KL right after exaggeration was removed
    betas: Array                # per-row kernel precisions (diagnostic)


def _row_probabilities(d_row: Array, beta: float) -> Array:
    # shifting the row leaves the softmax (and its entropy) unchanged
    p = np.exp(-(d_row - d_row.min()) * beta)
    s = p.sum()
    if s <= 0.0 or not np.isfinite(s):
        p = np.ones_like(d_row)
        s = p.sum()
    return p / s


def _entropy(p: Array) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def conditional_probabilities(distances: Array, perplexity: float,
                              tol: float = 1e-5, max_iter: int = 64
                              ) -> tuple[Array, Array]:
    """Per-row Gaussian conditionals with bandwidths matched to perplexity.

    Returns (P_conditional with zero diagonal, betas). The binary search
    targets |H(P_i) - log(perplexity)| <= tol and is best-effort on
    degenerate rows whose entropy does not depend on the bandwidth.
    """
    n = len(distances)
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    idx = np.arange(n)
    for i in range(n):
        d = distances[i, idx != i]
        beta, lo, hi = 1.0, 0.0, np.inf
        p = _row_probabilities(d, beta)
        for _ in range(max_iter):
            h = _entropy(p)
            if abs(h - target) <= tol:
                break
            if h > target:      # too flat: increase precision
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = beta / 2.0 if lo == 0.0 else 0.5 * (beta + lo)
            p = _row_probabilities(d, beta)
        betas[i] = beta
        P[i, idx != i] = p
    return P, betas


def _kl_divergence(P: Array, Q: Array) -> float:
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / Q[mask])).sum())


def tsne_embed(dist, cfg: EmbeddingConfig) -> EmbeddedSet:
    """Exact t-SNE over a precomputed distance matrix (DistanceMatrix or
    square ndarray). Deterministic given cfg.seed."""
    D = np.asarray(getattr(dist, "values", dist), dtype=float)
    n = len(D)
    if D.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if cfg.perplexity < 5.0:
        raise ValueError("perplexity must be >= 5")
    if n < 3 * cfg.perplexity:
        raise ValueError(
            f"need at least 3*perplexity={3 * cfg.perplexity:.0f} points, got {n}")

    Pc, betas = conditional_probabilities(D, cfg.perplexity)
    P = (Pc + Pc.T) / (2.0 * n)
    P = np.maximum(P, 1e-12)
    P /= P.sum()

    rng = np.random.default_rng(cfg.seed)
    Y = rng.standard_normal((n, cfg.n_y)) * 1e-4
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_exag_end = np.inf

    for it in range(cfg.iterations):
        exaggerating = it < cfg.exaggeration_iters
        P_eff = P * cfg.exaggeration if exaggerating else P

        sq = (Y * Y).sum(axis=1)
        num = 1.0 / (1.0 + sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)

        W = (P_eff - Q) * num
        grad = 4.0 * ((np.diag(W.sum(axis=1)) - W) @ Y)
        if not np.all(np.isfinite(grad)):
            bad = np.abs(grad)[np.isfinite(grad)]
            raise EmbeddingError(
                f"non-finite t-SNE gradient at iteration {it} "
                f"(max finite |grad| = {bad.max() if bad.size else 0:.3g})")

        momentum = cfg.momentum_start if it < cfg.momentum_switch else cfg.momentum_final
        same_sign = (grad > 0) == (velocity > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = momentum * velocity - cfg.learning_rate * (gains * grad)
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)

        if it == cfg.exaggeration_iters:
            kl_exag_end = _kl_divergence(P, Q)

    sq = (Y * Y).sum(axis=1)
    num = 1.0 / (1.0 + sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    kl = _kl_divergence(P, Q)
    if cfg.iterations <= cfg.exaggeration_iters:
        kl_exag_end = kl
    return EmbeddedSet(coordinates=Y, kl=kl, kl_exaggeration_end=kl_exag_end,
                       betas=betas)


# ---------------------------------------------------------------------------
# mapping network


@dataclass
class NetworkConfig:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 300
    seed: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    # derivative expressed in terms of the activation output
}


@dataclass
class MappingNetwork:
    """Fully connected regression network with input standardization."""

    layer_sizes: list[int]
    weights: list[Array]      # weights[i]: (layer_sizes[i], layer_sizes[i+1])
    biases: list[Array]
    activation: str
    input_mean: Array
    input_scale: Array
    final_rmse: float = float("nan")

    def forward(self, X: Array) -> Array:
        Z = (np.atleast_2d(X) - self.input_mean) / self.input_scale
        act = _ACTIVATIONS[self.activation][0]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            Z = act(Z @ W + b)
        return Z @ self.weights[-1] + self.biases[-1]

    def jacobian(self, x: Array) -> Array:
        """d(output)/d(input) at a single input, shape (n_y, n_in)."""
        act, dact = _ACTIVATIONS[self.activation]
        z = (np.asarray(x, dtype=float) - self.input_mean) / self.input_scale
        J = np.diag(1.0 / self.input_scale)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = act(z @ W + b)
            J = (dact(a)[:, None] * W.T) @ J
            z = a
        return self.weights[-1].T @ J

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [W for W in self.weights],
            "biases": [b for b in self.biases],
            "activation": self.activation,
            "input_mean": self.input_mean,
            "input_scale": self.input_scale,
            "final_rmse": float(self.final_rmse),
        }

    @staticmethod
    def from_dict(d: dict) -> "MappingNetwork":
        return MappingNetwork(
            layer_sizes=[int(v) for v in d["layer_sizes"]],
            weights=[np.asarray(W, dtype=float) for W in d["weights"]],
            biases=[np.asarray(b, dtype=float) for b in d["biases"]],
            activation=d["activation"],
            input_mean=np.asarray(d["input_mean"], dtype=float),
            input_scale=np.asarray(d["input_scale"], dtype=float),
            final_rmse=float(d["final_rmse"]),
        )


def _init_layers(sizes: list[int], rng: np.random.Generator
                 ) -> tuple[list[Array], list[Array]]:
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, (n_in, n_out)))
        biases.append(np.zeros(n_out))
    return weights, biases


def _forward_cached(weights, biases, activation, Z0):
    act = _ACTIVATIONS[activation][0]
    activations = [Z0]
    Z = Z0
    for W, b in zip(weights[:-1], biases[:-1]):
        Z = act(Z @ W + b)
        activations.append(Z)
    out = Z @ weights[-1] + biases[-1]
    return out, activations


def loss_and_gradients(weights, biases, activation, Z0, targets):
    """Mean-squared-error loss and its gradients w.r.t. all parameters."""
    dact = _ACTIVATIONS[activation][1]
    out, acts = _forward_cached(weights, biases, activation, Z0)
    diff = out - targets
    m = len(Z0)
    loss = float((diff * diff).sum() / m)
    delta = 2.0 * diff / m
    gW = [None] * len(weights)
    gb = [None] * len(biases)
    for layer in range(len(weights) - 1, -1, -1):
        gW[layer] = acts[layer].T @ delta
        gb[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ weights[layer].T) * dact(acts[layer])
    return loss, gW, gb


def train_mapping(inputs: Array, targets, cfg: Optional[NetworkConfig] = None,
                  seed: Optional[int] = None) -> MappingNetwork:
    """Fit the mapping network to reproduce the embedding (Adam on MSE)."""
    cfg = cfg or NetworkConfig()
    if seed is not None:
        cfg = NetworkConfig(**{**cfg.__dict__, "seed": seed})
    X = np.asarray(inputs, dtype=float)
    Y = np.asarray(getattr(targets, "coordinates", targets), dtype=float)
    if len(X) != len(Y):
        raise ValueError("input and target counts differ")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite training inputs")

    mean = X.mean(axis=0)
    scale = np.maximum(X.std(axis=0), 1e-8)
    Z = (X - mean) / scale

    # train against standardized targets and fold the rescaling back into
    # the output layer afterwards; embeddings can span tens of units and
    # would otherwise need far more optimizer steps to reach
    y_mean = Y.mean(axis=0)
    y_scale = np.maximum(Y.std(axis=0), 1e-8)
    Yn = (Y - y_mean) / y_scale

    sizes = [X.shape[1], *cfg.hidden, Y.shape[1]]
    rng = np.random.default_rng(cfg.seed)
    weights, biases = _init_layers(sizes, rng)

    mW = [np.zeros_like(W) for W in weights]
    vW = [np.zeros_like(W) for W in weights]
    mb = [np.zeros_like(b) for b in biases]
    vb = [np.zeros_like(b) for b in biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0

    n = len(Z)
    batch = min(cfg.batch_size, n)
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            sel = order[lo:lo + batch]
            loss, gW, gb = loss_and_gradients(weights, biases, cfg.activation,
                                              Z[sel], Yn[sel])
            if not np.isfinite(loss):
                raise EmbeddingError(
                    "mapping-network training diverged (non-finite loss); "
                    "try a lower learning rate")
            t += 1
            corr1 = 1.0 - beta1 ** t
            corr2 = 1.0 - beta2 ** t
            for i in range(len(weights)):
                mW[i] = beta1 * mW[i] + (1 - beta1) * gW[i]
                vW[i] = beta2 * vW[i] + (1 - beta2) * gW[i] ** 2
                weights[i] -= cfg.learning_rate * (mW[i] / corr1) / (
                    np.sqrt(vW[i] / corr2) + eps)
                mb[i] = beta1 * mb[i] + (1 - beta1) * gb[i]
                vb[i] = beta2 * vb[i] + (1 - beta2) * gb[i] ** 2
                biases[i] -= cfg.learning_rate * (mb[i] / corr1) / (
                    np.sqrt(vb[i] / corr2) + eps)

    weights[-1] = weights[-1] * y_scale[None, :]
    biases[-1] = biases[-1] * y_scale + y_mean
    net = MappingNetwork(layer_sizes=sizes, weights=weights, biases=biases,
                         activation=cfg.activation, input_mean=mean,
                         input_scale=scale)
    pred = net.forward(X)
    net.final_rmse = float(np.sqrt(((pred - Y) ** 2).sum(axis=1).mean()))
    return net


def map_input(net: MappingNetwork, x: Array) -> Array:
    """Deterministic forward pass for a single safety assessment input."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite assessment input")
    if x.ndim != 1 or len(x) != net.layer_sizes[0]:
        raise ValueError(
            f"input dimension {x.shape} does not match network ({net.layer_sizes[0]})")
    return net.forward(x)[0]
