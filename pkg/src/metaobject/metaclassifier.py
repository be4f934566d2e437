"""Region classifier over meta objects plus a background class.

Label 0 is the background class (patches discarded by screening); label
``c + 1`` is meta object ``c``. This is the feature-space stand-in for
fine-tuning a network's output layer on the discovered meta objects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import ValidationError
from .nn import MLP, init_mlp, train_mlp
from .rim import ClusterAssignment, RimModel
from .screening import ScreenedSet

log = logging.getLogger(__name__)

BACKGROUND = 0


@dataclass
class MetaTrainingSet:
    features: np.ndarray
    labels: np.ndarray
    patch_ids: np.ndarray
    n_meta: int
    n_background: int


def build_meta_training_set(screened: ScreenedSet, assignment: ClusterAssignment, patch_ids, X,
                            background_ratio: float = 0.25, seed: int = 0) -> MetaTrainingSet:
    """Label kept patches by cluster + 1 and a seeded subsample of discarded ones by 0.

    ``patch_ids``/``X`` must cover every kept and discarded patch;
    ``assignment`` rows follow ``screened.kept``.
    """
    patch_ids = np.asarray(patch_ids, dtype=np.int64)
    X = np.asarray(X, dtype=np.float64)
    if len(assignment.hard_label) != len(screened.kept):
        raise ValidationError("cluster assignment does not cover the kept patches")
    row = {int(p): i for i, p in enumerate(patch_ids)}
    try:
        kept_rows = np.array([row[int(p)] for p in screened.kept], dtype=np.int64)
        disc_rows = np.array([row[int(p)] for p in screened.discarded], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"patch {exc.args[0]} has no feature row") from None

    n_bg = int(np.floor(background_ratio * len(kept_rows) + 1e-9))
    if n_bg > 0 and len(disc_rows) == 0:
        log.warning("background_ratio=%g but no discarded patches; training without class 0", background_ratio)
        n_bg = 0
    n_bg = min(n_bg, len(disc_rows))
    if n_bg:
        rng = np.random.default_rng(seed)
        bg_rows = np.sort(rng.choice(disc_rows, size=n_bg, replace=False))
    else:
        bg_rows = np.zeros(0, dtype=np.int64)

    rows = np.r_[kept_rows, bg_rows]
    labels = np.r_[assignment.hard_label + 1, np.zeros(n_bg, dtype=np.int64)].astype(np.int64)
    return MetaTrainingSet(X[rows], labels, patch_ids[rows], assignment.probabilities.shape[1], n_bg)


@dataclass
class MetaClassifier:
    net: MLP
    n_meta: int

    def predict_proba(self, X) -> np.ndarray:
        return self.net.predict_proba(X)

    def to_dict(self):
        return {"net": self.net.to_dict(), "n_meta": self.n_meta}

    @classmethod
    def from_dict(cls, d):
        return cls(MLP.from_dict(d["net"]), int(d["n_meta"]))


def train_meta_classifier(ts: MetaTrainingSet, hidden: int = 256, epochs: int = 30, lr: float = 1e-3,
                          batch_size: int = 128, seed: int = 0, smoothing: float = 0.05) -> MetaClassifier:
    if len(ts.labels) == 0:
        raise ValidationError("empty meta-object training set")
    if ts.n_meta < 1:
        raise ValidationError("need at least one meta object")
    rng = np.random.default_rng(seed)
    net = init_mlp([ts.features.shape[1], hidden, ts.n_meta + 1], rng)
    train_mlp(net, ts.features, ts.labels, epochs=epochs, lr=lr, batch_size=batch_size,
              seed=int(rng.integers(2**31)), smoothing=smoothing)
    return MetaClassifier(net, ts.n_meta)


def classify_region(model: MetaClassifier, x) -> tuple[int, np.ndarray]:
    """Label in [0, N] (0 = background) and the N+1 class probabilities."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("classify_region expects a single feature vector")
    p = model.predict_proba(x[None, :])[0]
    return int(np.argmax(p)), p


def classify_regions(model: MetaClassifier, X) -> np.ndarray:
    return np.argmax(model.predict_proba(X), axis=1)


def rim_direct_labels(model: RimModel, X, threshold: float | None = None) -> np.ndarray:
    """Region labels straight from the clustering model (no classifier).

    A region is background when its largest cluster probability falls below
    ``threshold`` (default ``2 / N``); otherwise it gets ``argmax + 1``.
    """
    P = model.predict_proba(X)
    thr = 2.0 / model.n_clusters if threshold is None else threshold
    labels = np.argmax(P, axis=1) + 1
    labels[P.max(axis=1) < thr] = BACKGROUND
    return labels


def nearest_exemplar_labels(X, exemplars, exemplar_labels, chunk: int = 1024,
                            groups=None, exemplar_groups=None) -> np.ndarray:
    """Label each row with the label of its nearest exemplar (ties: lower index).

    With ``groups`` and ``exemplar_groups`` (e.g. image ids), exemplars from
    the row's own group are skipped.
    """
    X = np.asarray(X, dtype=np.float64)
    E = np.asarray(exemplars, dtype=np.float64)
    lab = np.asarray(exemplar_labels)
    exclude = groups is not None and exemplar_groups is not None
    if exclude:
        groups, exemplar_groups = np.asarray(groups), np.asarray(exemplar_groups)
    out = np.empty(len(X), dtype=lab.dtype if lab.size else np.int64)
    se = np.einsum("ij,ij->i", E, E)
    for s in range(0, len(X), chunk):
        d2 = se[None, :] - 2.0 * X[s:s + chunk] @ E.T
        if exclude:
            d2[groups[s:s + chunk, None] == exemplar_groups[None, :]] = np.inf
        out[s:s + chunk] = lab[np.argmin(d2, axis=1)]
    return out
