"""Discriminative clustering by regularized information maximization.

The cluster model is multinomial logistic, ``p(c|x) = softmax(W x + b)_c``,
and the objective maximized is

    H(mean_i p(.|x_i)) - mean_i H(p(.|x_i)) - lam * ||W||_F^2

(entropies in nats): balanced clusters, confident assignments, small weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, ValidationError, l2_normalize, log_softmax, softmax

log = logging.getLogger(__name__)

_TINY = 1e-300


@dataclass
class RimModel:
    weights: np.ndarray  # (N, d)
    biases: np.ndarray  # (N,)
    lam: float = 1e-4
    trace: list[float] = field(default_factory=list, repr=False)

    @property
    def n_clusters(self) -> int:
        return self.weights.shape[0]

    def logits(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.weights.shape[1]:
            raise ValidationError(f"expected (n, {self.weights.shape[1]}) features, got {X.shape}")
        return X @ self.weights.T + self.biases

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.logits(X))

    def to_dict(self):
        return {"weights": self.weights, "biases": self.biases, "lam": self.lam,
                "trace": np.asarray(self.trace, dtype=np.float64)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"]), np.asarray(d["biases"]), float(d["lam"]),
                   list(np.asarray(d.get("trace", []), dtype=np.float64)))


def _forward(W, b, X):
    logp = log_softmax(X @ W.T + b)
    P = np.exp(logp)
    pbar = P.mean(axis=0)
    return P, logp, pbar


def _objective_fwd(W, b, lam, X):
    fwd = _forward(W, b, X)
    P, logp, pbar = fwd
    h_marginal = -np.sum(pbar * np.log(np.maximum(pbar, _TINY)))
    h_conditional = -np.mean(np.sum(P * logp, axis=1))
    return h_marginal - h_conditional - lam * np.sum(W * W), fwd


def _objective(W, b, lam, X):
    return _objective_fwd(W, b, lam, X)[0]


def _gradient(W, b, lam, X, fwd=None):
    P, logp, pbar = _forward(W, b, X) if fwd is None else fwd
    n = X.shape[0]
    G = (logp - np.log(np.maximum(pbar, _TINY))) / n
    dZ = P * (G - np.sum(P * G, axis=1, keepdims=True))
    return dZ.T @ X - 2.0 * lam * W, dZ.sum(axis=0)


def rim_objective(model: RimModel, X) -> float:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValidationError("rim_objective needs a non-empty (n, d) matrix")
    return float(_objective(model.weights, model.biases, model.lam, X))


def rim_gradient(model: RimModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`rim_objective` with respect to (weights, biases)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValidationError("rim_gradient needs a non-empty (n, d) matrix")
    return _gradient(model.weights, model.biases, model.lam, X)


def kmeans_pp_labels(X, k: int, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    """Lloyd's k-means from a k-means++ seeding; returns hard labels."""
    n = len(X)
    sq = np.einsum("ij,ij->i", X, X)
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    d2 = np.clip(sq - 2.0 * X @ X[first] + sq[first], 0.0, None)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = X[idx]
        d2 = np.minimum(d2, np.clip(sq - 2.0 * X @ X[idx] + sq[idx], 0.0, None))
    labels = None
    for _ in range(max_iter):
        dist = sq[:, None] - 2.0 * X @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :]
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
    return labels


def least_squares_init(X, labels, k: int, lam: float, target_scale: float | None = None):
    """Ridge fit of logits to one-hot labels: (1/n)|[X 1] T - s Y|^2 + lam |W|^2.

    The one-hot targets are scaled by ``s`` (default ``2 ln k``) so the warm
    start already assigns confidently; from near-uniform predictions the
    ascent tends to merge clusters.
    """
    n, d = X.shape
    s = 2.0 * np.log(k) if target_scale is None else target_scale
    A = np.hstack([X, np.ones((n, 1))])
    Y = np.zeros((n, k))
    Y[np.arange(n), labels] = s
    reg = np.full(d + 1, max(lam, 1e-8))
    reg[-1] = 1e-10
    T = np.linalg.solve(A.T @ A / n + np.diag(reg), A.T @ Y / n)
    return T[:d].T.copy(), T[d].copy()


def _ascend(W, b, lam, X, max_iter, tol):
    f, fwd = _objective_fwd(W, b, lam, X)
    trace = [f]
    step = 1.0
    for _ in range(max_iter):
        gW, gb = _gradient(W, b, lam, X, fwd)
        gnorm2 = float(np.sum(gW * gW) + np.sum(gb * gb))
        if gnorm2 == 0.0:
            break
        accepted = False
        while step > 1e-12:
            W2 = W + step * gW
            b2 = b + step * gb
            f2, fwd2 = _objective_fwd(W2, b2, lam, X)
            if f2 >= f + 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        delta = f2 - f
        W, b, f, fwd = W2, b2, f2, fwd2
        trace.append(f)
        step *= 2.0
        if abs(delta) < tol:
            break
    return W, b, trace


def train_rim(X, n_clusters: int, lam: float = 1e-4, restarts: int = 3, seed: int = 0,
              max_iter: int = 2000, tol: float = 1e-7) -> RimModel:
    """Fit a RIM clustering model; best of ``restarts`` seeded runs."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("train_rim expects an (n, d) matrix")
    n = len(X)
    if n_clusters < 2:
        raise ConfigError("RIM needs at least 2 clusters")
    if n_clusters > n:
        raise ConfigError(f"cannot form {n_clusters} clusters from {n} points")
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    if lam < 0:
        raise ConfigError("lambda must be >= 0")

    best = None
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        rng = np.random.default_rng(child)
        labels = kmeans_pp_labels(X, n_clusters, rng)
        W, b = least_squares_init(X, labels, n_clusters, lam)
        W, b, trace = _ascend(W, b, lam, X, max_iter, tol)
        log.debug("RIM restart %d: objective %.6f after %d steps", r, trace[-1], len(trace) - 1)
        if best is None or trace[-1] > best.trace[-1]:
            best = RimModel(W, b, float(lam), trace)
    return best


@dataclass
class ClusterAssignment:
    hard_label: np.ndarray
    probabilities: np.ndarray
    cluster_centers: np.ndarray
    sizes: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.sizes == 0

    def to_dict(self):
        return {"hard_label": self.hard_label, "probabilities": self.probabilities,
                "cluster_centers": self.cluster_centers, "sizes": self.sizes}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["hard_label"], np.int64), np.asarray(d["probabilities"]),
                   np.asarray(d["cluster_centers"]), np.asarray(d["sizes"], np.int64))


def assign_clusters(model: RimModel, X) -> ClusterAssignment:
    X = np.asarray(X, dtype=np.float64)
    P = model.predict_proba(X)
    hard = np.argmax(P, axis=1)
    N = model.n_clusters
    sizes = np.bincount(hard, minlength=N)
    centers = np.zeros((N, X.shape[1]))
    np.add.at(centers, hard, X)
    nz = sizes > 0
    centers[nz] /= sizes[nz, None]
    if not nz.all():
        log.info("%d of %d clusters are empty", int((~nz).sum()), N)
    return ClusterAssignment(hard, P, centers, sizes)


def jitter_augment(X, copies: int, sigma: float, seed: int = 0) -> np.ndarray:
    """Append ``copies`` Gaussian-jittered, renormalized copies of every row.

    A feature-space stand-in for pixel-level augmentation; off when
    ``copies == 0`` or ``sigma == 0``.
    """
    X = np.asarray(X, dtype=np.float64)
    if copies <= 0 or sigma <= 0:
        return X
    rng = np.random.default_rng(seed)
    extra = [l2_normalize(X + sigma * rng.standard_normal(X.shape)) for _ in range(copies)]
    return np.vstack([X, *extra])
