"""nu one-class SVM trained on the dual, plus cascaded outlier pruning.

The dual solved here is::

    minimize    0.5 * a^T Q a
    subject to  0 <= a_i <= 1 / (nu * l),   sum(a) = 1

with ``Q_ij = k(x_i, x_j)``. Pairs of coordinates are updated at a time
(SMO with second-order working-set selection), which keeps ``sum(a) = 1``
exact. The decision value is ``sum_i a_i k(sv_i, x) - rho``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, ValidationError

log = logging.getLogger(__name__)

# decision values within this band of zero count as "on the margin"
MARGIN_TOL = 1e-6


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "linear"
    gamma: float | None = None  # rbf only; None -> 1 / median pairwise squared distance

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and self.gamma is not None:
            if not (np.isfinite(self.gamma) and self.gamma > 0):
                raise ConfigError("rbf gamma must be finite and positive")

    def resolve(self, X: np.ndarray) -> "KernelSpec":
        """Fill in the median-heuristic gamma for an rbf kernel."""
        if self.kind != "rbf" or self.gamma is not None:
            return self
        sq = np.sum(X * X, axis=1)
        d2 = np.clip(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0, None)
        iu = np.triu_indices(len(X), 1)
        med = float(np.median(d2[iu])) if len(iu[0]) else 0.0
        return KernelSpec("rbf", 1.0 / med if med > 0 else 1.0)

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return A @ B.T
        if self.gamma is None:
            raise ConfigError("rbf kernel used before gamma was resolved")
        sa = np.sum(A * A, axis=1)
        sb = np.sum(B * B, axis=1)
        d2 = np.clip(sa[:, None] + sb[None, :] - 2.0 * A @ B.T, 0.0, None)
        return np.exp(-self.gamma * d2)

    def to_dict(self):
        return {"kind": self.kind, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("gamma"))


@dataclass
class OcsvmModel:
    support_vectors: np.ndarray
    alphas: np.ndarray
    rho: float
    kernel: KernelSpec
    nu: float
    n_train: int
    support_index: np.ndarray  # rows of the training matrix
    iterations: int = 0
    converged: bool = True
    max_violation: float = 0.0

    @property
    def upper_bound(self) -> float:
        return 1.0 / (self.nu * self.n_train)

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.support_vectors.shape[1]:
            raise ValidationError(
                f"dimension mismatch: model has d={self.support_vectors.shape[1]}, input has d={X.shape[1]}"
            )
        return self.kernel(X, self.support_vectors) @ self.alphas - self.rho

    def dual_objective(self) -> float:
        K = self.kernel(self.support_vectors, self.support_vectors)
        return 0.5 * float(self.alphas @ K @ self.alphas)

    def to_dict(self):
        return {
            "support_vectors": self.support_vectors,
            "alphas": self.alphas,
            "rho": self.rho,
            "kernel": self.kernel.to_dict(),
            "nu": self.nu,
            "n_train": self.n_train,
            "support_index": self.support_index,
            "iterations": self.iterations,
            "converged": self.converged,
            "max_violation": self.max_violation,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["kernel"] = KernelSpec.from_dict(d["kernel"])
        return cls(**d)


def decision_value(model: OcsvmModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("decision_value expects a single feature vector")
    return float(model.decision_function(x[None, :])[0])


def train_ocsvm(features, nu: float = 0.15, kernel: KernelSpec | None = None,
                tol: float = 1e-7, max_iter: int = 100_000) -> OcsvmModel:
    """Fit a nu one-class SVM by pairwise coordinate descent on the dual.

    ``tol`` bounds the final KKT violation (max gradient gap between a
    coordinate that may grow and one that may shrink).
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("features must be an (l, d) matrix")
    l = X.shape[0]
    if l < 2:
        raise ConfigError("one-class SVM needs at least 2 training points")
    if not 0 < nu <= 1:
        raise ConfigError(f"nu must lie in (0, 1], got {nu}")
    if nu * l < 1:
        raise ConfigError(f"nu * l = {nu * l:.3g} < 1: too few points for nu={nu}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("non-finite training features")

    kernel = (kernel or KernelSpec()).resolve(X)
    Q = kernel(X, X)
    C = 1.0 / (nu * l)
    alpha = np.full(l, 1.0 / l)
    G = Q @ alpha
    diag = np.diag(Q).copy()
    jittered = False

    it = 0
    violation = np.inf
    while it < max_iter:
        up = alpha < C
        low = alpha > 0
        if not up.any() or not low.any():
            violation = 0.0
            break
        Gu = np.where(up, G, np.inf)
        i = int(np.argmin(Gu))
        gi = G[i]
        Gl = np.where(low, G, -np.inf)
        violation = float(Gl.max() - gi)
        if violation < tol:
            break
        # second-order choice of the coordinate to shrink
        diff = G - gi
        eta = Q[i, i] + diag - 2.0 * Q[i]
        cand = low & (diff > 0)
        gain = np.where(cand, diff * diff / np.where(eta > 0, eta, 1e-12), -np.inf)
        j = int(np.argmax(gain))
        eta_ij = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
        if eta_ij <= 0:
            if jittered:
                raise NumericalError(
                    f"kernel matrix not positive semidefinite (pair {i},{j} curvature {eta_ij:.3g})"
                )
            log.debug("non-descent pair (%d, %d); adding jitter to the kernel diagonal", i, j)
            Q = Q + 1e-10 * np.eye(l)
            diag = np.diag(Q).copy()
            G = Q @ alpha
            jittered = True
            continue
        delta = (G[j] - gi) / eta_ij
        cap_i = C - alpha[i]
        cap_j = alpha[j]
        if delta >= cap_i or delta >= cap_j:
            if cap_i <= cap_j:
                delta = cap_i
                alpha[i] = C
                alpha[j] = alpha[j] - delta if cap_i < cap_j else 0.0
            else:
                delta = cap_j
                alpha[j] = 0.0
                alpha[i] = alpha[i] + delta
        else:
            alpha[i] += delta
            alpha[j] -= delta
        G += delta * (Q[:, i] - Q[:, j])
        it += 1

    converged = violation < tol
    if not converged:
        log.warning("one-class SVM stopped after %d pair updates, KKT violation %.3g", it, violation)

    # recompute the gradient from scratch to shed accumulated drift
    G = Q @ alpha
    free = (alpha > 1e-12 * C) & (alpha < C * (1 - 1e-12))
    if free.any():
        rho = float(np.mean(G[free]))
    else:
        at_upper = alpha >= C * (1 - 1e-12)
        at_zero = ~at_upper
        lo = G[at_upper].max() if at_upper.any() else None
        hi = G[at_zero].min() if at_zero.any() else None
        if lo is None:
            rho = float(hi)
        elif hi is None:
            rho = float(lo)
        else:
            rho = 0.5 * float(lo + hi)

    sv = np.flatnonzero(alpha > 0)
    return OcsvmModel(
        support_vectors=X[sv].copy(),
        alphas=alpha[sv].copy(),
        rho=rho,
        kernel=kernel,
        nu=float(nu),
        n_train=l,
        support_index=sv,
        iterations=it,
        converged=bool(converged),
        max_violation=float(violation),
    )


def primal_objective(model: OcsvmModel, X) -> float:
    """Primal value 0.5|w|^2 + sum(xi)/(nu l) - rho at the model's (w, rho)."""
    X = np.asarray(X, dtype=np.float64)
    scores = model.kernel(X, model.support_vectors) @ model.alphas
    slack = np.clip(model.rho - scores, 0.0, None)
    return model.dual_objective() + slack.sum() / (model.nu * len(X)) - model.rho


def relative_duality_gap(model: OcsvmModel, X) -> float:
    d = model.dual_objective()
    return (primal_objective(model, X) + d) / max(abs(d), 1e-300)


@dataclass
class CascadeResult:
    kept: np.ndarray
    removed_per_stage: list[np.ndarray]
    models: list[OcsvmModel]
    flags: list[str] = field(default_factory=list)

    @property
    def stopped_early(self) -> bool:
        return any(f.startswith("stopped early") for f in self.flags)

    def to_dict(self):
        return {
            "kept": self.kept,
            "removed_per_stage": list(self.removed_per_stage),
            "models": [m.to_dict() for m in self.models],
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kept=np.asarray(d["kept"], dtype=np.int64),
            removed_per_stage=[np.asarray(r, dtype=np.int64) for r in d["removed_per_stage"]],
            models=[OcsvmModel.from_dict(m) for m in d["models"]],
            flags=list(d["flags"]),
        )


def removal_count(n: int, fraction: float) -> int:
    # guard against 0.15 * 100 = 15.000000000000002 style float noise
    return int(np.floor(fraction * n + 1e-9))


def cascade_screen(patch_ids, features, stages: int = 3, per_stage_fraction: float = 0.15,
                   nu: float = 0.15, kernel: KernelSpec | None = None) -> CascadeResult:
    """Prune the lowest-scoring patches of one scene category, stage by stage.

    Each stage retrains from scratch on the survivors and removes exactly
    ``floor(per_stage_fraction * count)`` patches with the lowest decision
    values (ties: smaller patch id removed first).
    """
    if stages < 1:
        raise ConfigError("cascade needs at least one stage")
    if not 0 < per_stage_fraction < 1:
        raise ConfigError("per_stage_fraction must lie in (0, 1)")
    ids = np.asarray(patch_ids, dtype=np.int64)
    X = np.asarray(features, dtype=np.float64)
    if len(ids) != len(X):
        raise ValidationError("patch_ids and features differ in length")
    if len(np.unique(ids)) != len(ids):
        raise ValidationError("duplicate patch ids passed to cascade_screen")

    alive = np.arange(len(ids))
    removed, models, flags = [], [], []
    for s in range(stages):
        n = len(alive)
        if n < 2 or nu * n < 1:
            flags.append(f"stopped early at stage {s}: {n} patches remaining")
            log.warning("cascade stopped early at stage %d with %d patches", s, n)
            break
        model = train_ocsvm(X[alive], nu=nu, kernel=kernel)
        models.append(model)
        k = removal_count(n, per_stage_fraction)
        if k == 0:
            flags.append(f"no-op stage {s}")
            removed.append(np.zeros(0, dtype=np.int64))
            continue
        scores = model.decision_function(X[alive])
        order = np.lexsort((ids[alive], scores))
        drop = np.sort(order[:k])
        removed.append(np.sort(ids[alive[drop]]))
        alive = np.delete(alive, drop)
    return CascadeResult(kept=np.sort(ids[alive]), removed_per_stage=removed, models=models, flags=flags)
