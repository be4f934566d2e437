"""Image-level pooling of region labels and features.

* Adaptive spatial pyramid: three levels of 2x2 splits (1 + 4 + 16 cells),
  each cell split at the centroid of the region centers inside it.
* Modified VLAD: residuals to the meta-object centers, summed per cluster,
  projected by a per-cluster PCA, signed-square-rooted and L2 normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ValidationError

SPM_LEVELS = 3


def _spm_cells(centers: np.ndarray, levels: int):
    """Yield (level, member-index array) for every cell, level by level.

    Cells are ordered level-major; the children of a cell are ordered
    (left-low, right-low, left-high, right-high), and a center lying exactly
    on a split line goes to the lower-index child.
    """
    cells = [(np.arange(len(centers)), (0.0, 1.0, 0.0, 1.0))]
    out = []
    for level in range(levels):
        nxt = []
        for members, (x0, x1, y0, y1) in cells:
            out.append((level, members))
            if level == levels - 1:
                continue
            if len(members):
                sx, sy = centers[members].mean(axis=0)
            else:
                sx, sy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            px = centers[members, 0]
            py = centers[members, 1]
            left, low = px <= sx, py <= sy
            nxt.append((members[left & low], (x0, sx, y0, sy)))
            nxt.append((members[~left & low], (sx, x1, y0, sy)))
            nxt.append((members[left & ~low], (x0, sx, sy, y1)))
            nxt.append((members[~left & ~low], (sx, x1, sy, y1)))
        cells = nxt
    return out


def spm_counts(centers, labels, n_meta: int, levels: int = SPM_LEVELS) -> np.ndarray:
    """Raw per-cell label counts, shape ``(n_cells, n_meta)``.

    Labels are in ``[1, n_meta]``; background (0) regions are dropped.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(centers) != len(labels):
        raise ValidationError("centers and labels differ in length")
    keep = labels != 0
    centers, labels = centers[keep], labels[keep]
    if len(labels) and (labels.min() < 1 or labels.max() > n_meta):
        raise ValidationError(f"region labels must lie in [1, {n_meta}]")
    cells = _spm_cells(centers, levels)
    H = np.zeros((len(cells), n_meta))
    for i, (_, members) in enumerate(cells):
        if len(members):
            H[i] = np.bincount(labels[members] - 1, minlength=n_meta)
    return H


def spm_encode(centers, labels, n_meta: int, levels: int = SPM_LEVELS) -> np.ndarray:
    """Concatenated per-cell L1-normalized label histograms (``21 * N`` for 3 levels)."""
    H = spm_counts(centers, labels, n_meta, levels)
    tot = H.sum(axis=1, keepdims=True)
    H = np.divide(H, tot, out=np.zeros_like(H), where=tot > 0)
    return H.reshape(-1)


def spm_dim(n_meta: int, levels: int = SPM_LEVELS) -> int:
    return n_meta * sum(4 ** l for l in range(levels))


@dataclass
class PcaModel:
    """Per-cluster projections, ``projections[c]`` is ``(m, d)``."""

    means: np.ndarray  # (N, d)
    projections: np.ndarray  # (N, m, d)
    flags: list[str] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return self.projections.shape[1]

    @property
    def n_clusters(self) -> int:
        return self.projections.shape[0]

    def to_dict(self):
        return {"means": self.means, "projections": self.projections, "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["means"]), np.asarray(d["projections"]), list(d["flags"]))


def vlad_components(d: int, k: int) -> int:
    """Per-cluster PCA width: ``floor(d / k)``, but never below one."""
    return max(1, d // k)


def fix_signs(V: np.ndarray) -> np.ndarray:
    """Flip rows so each row's largest-magnitude entry is positive."""
    V = V.copy()
    for r in range(len(V)):
        i = int(np.argmax(np.abs(V[r])))
        if V[r, i] < 0:
            V[r] = -V[r]
    return V


def nearest_centers(X, centers, active=None) -> np.ndarray:
    """Index of the nearest active center for each row (ties: smaller index)."""
    X = np.asarray(X, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    d2 = squared_distances(X, centers)
    if active is not None:
        d2[:, ~np.asarray(active, dtype=bool)] = np.inf
    return np.argmin(d2, axis=1)


def squared_distances(X, Y, chunk_bytes: int = 1 << 27) -> np.ndarray:
    """Exact pairwise squared distances, computed in row chunks to bound memory."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    out = np.empty((len(X), len(Y)))
    step = max(1, chunk_bytes // max(1, 8 * Y.size))
    for s in range(0, len(X), step):
        diff = X[s:s + step, None, :] - Y[None, :, :]
        out[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def residual_sums(X, centers, active=None, assign=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster residual sums ``(N, d)`` and region counts ``(N,)``.

    ``assign`` optionally gives each row's cluster index in place of the
    nearest-center search.
    """
    X = np.asarray(X, dtype=np.float64).reshape(-1, np.shape(centers)[1])
    N, d = np.shape(centers)
    sums = np.zeros((N, d))
    counts = np.zeros(N, dtype=np.int64)
    if len(X) == 0:
        return sums, counts
    a = nearest_centers(X, centers, active) if assign is None else np.asarray(assign, dtype=np.int64)
    np.add.at(sums, a, X - np.asarray(centers)[a])
    counts += np.bincount(a, minlength=N)
    return sums, counts


def fit_vlad_pca(image_regions, centers, k: int | None = None, active=None, assignments=None) -> PcaModel:
    """Fit one PCA per cluster on the per-image residual sums of training images.

    ``image_regions`` is a list of ``(m_i, d)`` region-feature arrays with
    background regions already removed. Only images where a cluster received
    at least one region contribute to that cluster's PCA. ``k`` sets the
    block width ``max(1, floor(d / k))`` and defaults to the number of
    centers. ``assignments``, when given, holds one cluster-index array per
    image in place of the nearest-center search.
    """
    centers = np.asarray(centers, dtype=np.float64)
    N, d = centers.shape
    if active is None:
        active = np.ones(N, dtype=bool)
    active = np.asarray(active, dtype=bool)
    k = N if k is None else k
    if k > int(active.sum()):
        raise ValidationError(f"k={k} exceeds the {int(active.sum())} non-empty clusters")
    m = vlad_components(d, k)
    per_cluster = [[] for _ in range(N)]
    for i, R in enumerate(image_regions):
        sums, counts = residual_sums(R, centers, active, None if assignments is None else assignments[i])
        for c in np.flatnonzero(counts):
            per_cluster[c].append(sums[c])

    means = np.zeros((N, d))
    proj = np.zeros((N, m, d))
    flags = []
    for c in range(N):
        A = np.asarray(per_cluster[c])
        if not active[c]:
            continue
        if len(A) == 0:
            flags.append(f"cluster {c}: no training aggregates, zero projection")
            continue
        mu = A.mean(axis=0)
        Ac = A - mu
        evals, evecs = np.linalg.eigh(Ac.T @ Ac)
        order = np.argsort(-evals, kind="stable")
        V = fix_signs(evecs[:, order[:m]].T)
        if evals.max() <= 1e-12 * max(1.0, float(np.abs(A).max()) ** 2):
            flags.append(f"cluster {c}: zero-variance aggregates, arbitrary orthonormal basis")
        if len(A) < m:
            V[len(A):] = 0.0
            flags.append(f"cluster {c}: {len(A)} aggregates < {m} components, padded with zero rows")
        means[c] = mu
        proj[c] = V
    return PcaModel(means, proj, flags)


def signed_sqrt_l2(v: np.ndarray) -> np.ndarray:
    v = np.sign(v) * np.sqrt(np.abs(v))
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def vlad_encode(X, centers, pca: PcaModel, active=None, assign=None) -> np.ndarray:
    """VLAD vector of one image's (non-background) region features."""
    sums, _ = residual_sums(X, centers, active, assign)
    blocks = np.einsum("cmd,cd->cm", pca.projections, sums)
    return signed_sqrt_l2(blocks.reshape(-1))


def vlad_dim(d: int, n_meta: int, k: int | None = None) -> int:
    return n_meta * vlad_components(d, n_meta if k is None else k)


@dataclass
class ImageRepresentation:
    pooled: list[np.ndarray]
    holistic: np.ndarray
    beta: float
    fused: np.ndarray


def build_image_representation(level_outputs, holistic, beta: float, layout=None) -> ImageRepresentation:
    """Fuse per-level pooled vectors with the holistic feature.

    Order is fixed: level blocks as given (bottom first), then holistic. Pooled
    blocks are scaled by ``beta`` and the holistic block by ``1 - beta``.
    ``layout``, when given, lists the expected block widths (levels then
    holistic).
    """
    if not 0 <= beta <= 1:
        raise ValidationError("beta must lie in [0, 1]")
    pooled = [np.asarray(v, dtype=np.float64).reshape(-1) for v in level_outputs]
    holistic = np.asarray(holistic, dtype=np.float64).reshape(-1)
    if layout is not None:
        got = [len(v) for v in pooled] + [len(holistic)]
        if list(layout) != got:
            raise ValidationError(f"dimension mismatch: layout {list(layout)} vs blocks {got}")
    fused = np.concatenate([beta * v for v in pooled] + [(1.0 - beta) * holistic])
    return ImageRepresentation(pooled, holistic, float(beta), fused)


def block_weights(layout, beta: float) -> np.ndarray:
    """Per-dimension fusion weights for a layout (levels..., holistic)."""
    *levels, hol = layout
    return np.concatenate([np.full(n, beta) for n in levels] + [np.full(hol, 1.0 - beta)])
