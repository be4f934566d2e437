"""Scene classifier over fused image representations, plus evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, ValidationError
from .nn import MLP, init_mlp, loss_and_grad, train_mlp
from .pooling import ImageRepresentation, block_weights

log = logging.getLogger(__name__)

HIDDEN = (200, 200)
BETA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


def _as_matrix(reps) -> np.ndarray:
    if isinstance(reps, np.ndarray):
        return np.asarray(reps, dtype=np.float64)
    return np.vstack([r.fused if isinstance(r, ImageRepresentation) else np.asarray(r) for r in reps])


@dataclass
class SceneClassifier:
    """MLP over standardized fused vectors.

    Each input dimension is standardized with training statistics and then
    multiplied by ``2 * w`` where ``w`` is its fusion weight (``beta`` for
    pooled blocks, ``1 - beta`` for the holistic block). Plain standardization
    would undo the fusion weights, so they are reapplied; ``beta = 0.5``
    leaves every block at unit scale.
    """

    net: MLP
    mean: np.ndarray
    scale: np.ndarray  # per-dimension std, 0 where constant
    gain: np.ndarray  # per-dimension post-standardization multiplier
    beta: float
    layout: tuple
    config_hash: str = ""

    @property
    def n_classes(self) -> int:
        return self.net.n_outputs

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.mean):
            raise ValidationError(f"dimension mismatch: classifier expects {len(self.mean)} inputs, got {X.shape[1]}")
        Z = np.divide(X - self.mean, self.scale, out=np.zeros_like(X), where=self.scale > 0)
        return Z * self.gain

    def predict_proba(self, X) -> np.ndarray:
        return self.net.predict_proba(self.transform(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.net.logits(self.transform(X)), axis=1)

    def to_dict(self):
        return {"net": self.net.to_dict(), "mean": self.mean, "scale": self.scale, "gain": self.gain,
                "beta": self.beta, "layout": list(self.layout), "config_hash": self.config_hash}

    @classmethod
    def from_dict(cls, d):
        return cls(MLP.from_dict(d["net"]), np.asarray(d["mean"]), np.asarray(d["scale"]),
                   np.asarray(d["gain"]), float(d["beta"]), tuple(int(v) for v in d["layout"]),
                   str(d.get("config_hash", "")))


def fit_standardizer(X, layout, beta: float):
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 0.0
    if layout is None:
        gain = np.ones(X.shape[1])
    else:
        if sum(layout) != X.shape[1]:
            raise ValidationError(f"dimension mismatch: layout {list(layout)} sums to {sum(layout)}, got {X.shape[1]}")
        gain = 2.0 * block_weights(layout, beta)
    return mean, scale, gain


def scene_loss_and_grad(model: SceneClassifier, X, y):
    """Mean cross-entropy of the network on already-transformed inputs."""
    return loss_and_grad(model.net, X, y)


def train_scene_classifier(reps, labels, layout=None, beta: float = 0.5, n_classes: int | None = None,
                           epochs: int = 200, lr: float = 1e-3, batch_size: int = 64, seed: int = 0,
                           hidden=HIDDEN, weight_decay: float = 0.0, config_hash: str = "") -> SceneClassifier:
    """Seeded mini-batch training of a ReLU MLP (default 200-200) on fused vectors."""
    X = _as_matrix(reps)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) != len(y):
        raise ValidationError("representations and labels differ in length")
    if len(np.unique(y)) < 2:
        raise ValidationError("need at least 2 classes to train a scene classifier")
    C = int(y.max()) + 1 if n_classes is None else int(n_classes)
    mean, scale, gain = fit_standardizer(X, layout, beta)
    rng = np.random.default_rng(seed)
    net = init_mlp([X.shape[1], *hidden, C], rng)
    model = SceneClassifier(net, mean, scale, gain, float(beta),
                            tuple(layout) if layout is not None else (X.shape[1],), config_hash)
    train_mlp(net, model.transform(X), y, epochs=epochs, lr=lr, batch_size=batch_size,
              seed=int(rng.integers(2**31)), weight_decay=weight_decay)
    return model


def fuse_blocks(blocks, beta: float) -> np.ndarray:
    """Fused matrix from per-block matrices (levels..., holistic)."""
    *levels, hol = blocks
    return np.hstack([beta * np.asarray(b) for b in levels] + [(1.0 - beta) * np.asarray(hol)])


def holdout_split(labels, fraction: float = 0.2, seed: int = 0):
    """Seeded split into (fit rows, held-out rows); every class must appear in the held-out part.

    One reshuffle is attempted before giving up.
    """
    y = np.asarray(labels)
    n = len(y)
    n_hold = int(np.floor(fraction * n))
    if n_hold < 1 or n_hold >= n:
        raise ConfigError(f"held-out fraction {fraction} leaves an empty split for {n} images")
    classes = np.unique(y)
    rng = np.random.default_rng(seed)
    for attempt in range(2):
        perm = rng.permutation(n)
        hold, fit = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
        if np.array_equal(np.unique(y[hold]), classes):
            return fit, hold
        log.warning("held-out split misses a class (attempt %d)", attempt + 1)
    raise ValidationError("a class is absent from the held-out split after reshuffling")


def cross_validate_beta(blocks, labels, grid=BETA_GRID, seed: int = 0, fraction: float = 0.2,
                        **train_kwargs) -> tuple[float, dict]:
    """Pick the fusion weight with the best held-out accuracy (ties: smaller beta).

    ``blocks`` holds one ``(n, dim)`` matrix per level followed by the
    holistic matrix, all over the training images. Returns the chosen beta
    and the per-beta held-out accuracies.
    """
    grid = sorted(float(b) for b in grid)
    if not grid:
        raise ConfigError("beta grid is empty")
    if len(grid) == 1:
        return grid[0], {}
    y = np.asarray(labels, dtype=np.int64)
    fit, hold = holdout_split(y, fraction, seed)
    layout = tuple(np.shape(b)[1] for b in blocks)
    C = int(y.max()) + 1
    scores = {}
    for beta in grid:
        X = fuse_blocks(blocks, beta)
        model = train_scene_classifier(X[fit], y[fit], layout, beta, n_classes=C, seed=seed, **train_kwargs)
        scores[beta] = float(np.mean(model.predict(X[hold]) == y[hold]))
        log.debug("beta=%.2f held-out accuracy %.4f", beta, scores[beta])
    best = max(grid, key=lambda b: (scores[b], -b))
    return best, scores


@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray  # rows = true class, columns = predicted
    predictions: np.ndarray

    def to_dict(self):
        return {"accuracy": self.accuracy, "per_class": self.per_class,
                "confusion": self.confusion, "predictions": self.predictions}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["accuracy"]), np.asarray(d["per_class"]),
                   np.asarray(d["confusion"], np.int64), np.asarray(d["predictions"], np.int64))

    def summary(self) -> str:
        return f"accuracy {self.accuracy:.4f} over {int(self.confusion.sum())} test images"


def report_from_predictions(pred, labels, n_classes: int) -> EvalReport:
    pred = np.asarray(pred, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    rows = conf.sum(axis=1)
    per_class = np.divide(np.diag(conf), rows, out=np.zeros(n_classes), where=rows > 0)
    acc = float(np.trace(conf) / conf.sum()) if conf.sum() else 0.0
    return EvalReport(acc, per_class, conf, pred)


def evaluate(model: SceneClassifier, test_reps, labels) -> EvalReport:
    X = _as_matrix(test_reps)
    return report_from_predictions(model.predict(X), labels, model.n_classes)


def write_eval_csv(path, report: EvalReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["accuracy", repr(report.accuracy)])
        for c, a in enumerate(report.per_class):
            w.writerow([f"class_{c}", repr(float(a))])


def write_confusion_csv(path, report: EvalReport):
    C = report.confusion.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *range(C)])
        for c in range(C):
            w.writerow([c, *(int(v) for v in report.confusion[c])])
