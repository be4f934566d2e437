"""Weakly supervised soft screening of patches by cross-image kNN votes.

A patch's weight is the fraction of its K nearest neighbours (taken from
every *other* training image) whose image has the same scene label. Low
weights mark patches that are common to many categories or isolated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, ValidationError

# relative slack used when shortlisting candidates from Gram-matrix distances;
# the final ordering always uses directly computed distances
_SHORTLIST_SLACK = 1e-9


@dataclass
class PatchWeights:
    patch_ids: np.ndarray
    counts: np.ndarray  # K_y per patch
    K: int

    @property
    def weights(self) -> np.ndarray:
        return self.counts / self.K

    def to_dict(self):
        return {"patch_ids": self.patch_ids, "counts": self.counts, "K": self.K}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["patch_ids"], np.int64), np.asarray(d["counts"], np.int64), int(d["K"]))


@dataclass
class ScreenedSet:
    kept: np.ndarray
    discarded: np.ndarray
    total_screening_ratio: float

    def to_dict(self):
        return {"kept": self.kept, "discarded": self.discarded,
                "total_screening_ratio": self.total_screening_ratio}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["kept"], np.int64), np.asarray(d["discarded"], np.int64),
                   float(d["total_screening_ratio"]))


def squared_distances(X: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances from ``q`` to each row of ``X``."""
    diff = X - q
    return np.einsum("ij,ij->i", diff, diff)


def nearest_neighbors(X, patch_ids, image_ids, K: int, chunk: int = 512):
    """K nearest cross-image neighbours of every row, as row indices.

    Rows sharing the query's image id are never candidates. Distance ties
    resolve to the smaller patch id. Returns an ``(n, K)`` index array.
    """
    X = np.asarray(X, dtype=np.float64)
    patch_ids = np.asarray(patch_ids, dtype=np.int64)
    image_ids = np.asarray(image_ids, dtype=np.int64)
    n = len(X)
    if K < 1:
        raise ConfigError("K must be >= 1")
    _, per_image = np.unique(image_ids, return_counts=True)
    pool = n - (per_image.max() if n else 0)
    if n and pool < K:
        raise ConfigError(
            f"candidate pool of {pool} patches (excluding the query's image) is smaller than K={K}; "
            f"use K <= {pool}"
        )
    sq = np.einsum("ij,ij->i", X, X)
    scale = sq.max() if n else 0.0
    out = np.empty((n, K), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        approx = sq[start:stop, None] + sq[None, :] - 2.0 * (X[start:stop] @ X.T)
        same = image_ids[start:stop, None] == image_ids[None, :]
        approx[same] = np.inf
        kth = np.partition(approx, K - 1, axis=1)[:, K - 1]
        kth = kth + _SHORTLIST_SLACK * (1.0 + sq[start:stop] + scale)
        for r in range(stop - start):
            q = start + r
            cand = np.flatnonzero(approx[r] <= kth[r])
            dist = squared_distances(X[cand], X[q])
            order = np.lexsort((patch_ids[cand], dist))[:K]
            out[q] = cand[order]
    return out


def compute_patch_weights(X, patch_ids, image_ids, labels, K: int = 100) -> PatchWeights:
    """Soft screening weight K_y / K for every patch.

    ``labels`` are the scene labels of each patch's image.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    patch_ids = np.asarray(patch_ids, dtype=np.int64)
    if not (len(X) == len(patch_ids) == len(labels) == len(image_ids)):
        raise ValidationError("compute_patch_weights inputs differ in length")
    nn = nearest_neighbors(X, patch_ids, image_ids, K)
    counts = (labels[nn] == labels[:, None]).sum(axis=1)
    return PatchWeights(patch_ids.copy(), counts.astype(np.int64), int(K))


def soft_screen(weights: PatchWeights, discard_ratio: float, groups=None,
                reference_count: int | None = None) -> ScreenedSet:
    """Discard the ``floor(discard_ratio * n)`` lowest-weight patches.

    Ranking is global unless ``groups`` (one label per patch) is given, in
    which case each group is ranked and trimmed separately. Ties go to the
    smaller patch id. ``reference_count`` is the pre-cascade patch count used
    for the reported total screening ratio (defaults to ``n``).
    """
    if not 0 <= discard_ratio < 1:
        raise ConfigError("discard_ratio must lie in [0, 1)")
    ids = weights.patch_ids
    w = weights.counts.astype(np.float64)
    n = len(ids)
    drop = np.zeros(n, dtype=bool)
    if groups is None:
        parts = [np.arange(n)]
    else:
        groups = np.asarray(groups)
        parts = [np.flatnonzero(groups == g) for g in np.unique(groups)]
    for rows in parts:
        k = int(np.floor(discard_ratio * len(rows) + 1e-9))
        if k:
            order = np.lexsort((ids[rows], w[rows]))
            drop[rows[order[:k]]] = True
    kept = np.sort(ids[~drop])
    discarded = np.sort(ids[drop])
    total = reference_count if reference_count is not None else n
    ratio = 1.0 - len(kept) / total if total else 0.0
    return ScreenedSet(kept, discarded, ratio)


def weight_histogram(weights: PatchWeights, bins: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Counts over ``bins`` equal-width bins of [0, 1]; returns (counts, edges)."""
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    edges = np.linspace(0.0, 1.0, bins + 1)
    # integer arithmetic on K_y keeps bin membership exact; 1.0 falls in the last bin
    idx = np.minimum((weights.counts * bins) // weights.K, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return counts, edges


def write_histogram_csv(path, counts, edges):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c)])
