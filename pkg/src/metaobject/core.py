"""Shared domain types, vector helpers and dataset validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

LEVELS = ("bottom", "top")
SPLITS = ("train", "test")


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class ConfigError(ValueError):
    """Raised for infeasible or out-of-range configuration values."""


def l2_normalize(v):
    """Scale ``v`` (a vector, or the rows of a matrix) to unit Euclidean norm.

    Zero vectors are returned unchanged. Non-finite entries raise
    :class:`ValidationError`.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValidationError("cannot normalize a vector with non-finite entries")
    if v.ndim == 1:
        n = np.linalg.norm(v)
        return v / n if n > 0 else v.copy()
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return v / safe


def softmax(Z):
    """Row-wise softmax of a 2-d array."""
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def log_softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class PatchRecord:
    patch_id: int
    image_id: int
    feature: np.ndarray
    bbox: tuple[float, float, float, float]  # (cx, cy, w, h), image-relative
    level: str = "bottom"


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    scene_label: int
    patches: tuple[int, ...]
    holistic: np.ndarray
    split: str = "train"


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    @property
    def ok(self):
        return not self.violations


@dataclass(frozen=True)
class Dataset:
    """Images, their region proposals and holistic features.

    Records are kept as tuples so malformed inputs can still be built and
    reported on by :func:`validate_dataset`; the dense views (``patch_matrix``
    and friends) assume a valid dataset.
    """

    images: tuple[ImageRecord, ...]
    patches: tuple[PatchRecord, ...]
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "patches", tuple(self.patches))

    @cached_property
    def patch_index(self) -> dict[int, int]:
        return {p.patch_id: i for i, p in enumerate(self.patches)}

    @cached_property
    def image_index(self) -> dict[int, int]:
        return {im.image_id: i for i, im in enumerate(self.images)}

    @cached_property
    def patch_matrix(self) -> np.ndarray:
        if not self.patches:
            return np.zeros((0, self.feature_dim))
        return np.stack([p.feature for p in self.patches]).astype(np.float64)

    @cached_property
    def patch_ids(self) -> np.ndarray:
        return np.array([p.patch_id for p in self.patches], dtype=np.int64)

    @cached_property
    def patch_image_ids(self) -> np.ndarray:
        return np.array([p.image_id for p in self.patches], dtype=np.int64)

    @cached_property
    def patch_levels(self) -> np.ndarray:
        return np.array([p.level for p in self.patches])

    @cached_property
    def patch_bboxes(self) -> np.ndarray:
        if not self.patches:
            return np.zeros((0, 4))
        return np.array([p.bbox for p in self.patches], dtype=np.float64)

    @cached_property
    def patch_labels(self) -> np.ndarray:
        """Scene label of the image owning each patch."""
        lab = {im.image_id: im.scene_label for im in self.images}
        return np.array([lab[p.image_id] for p in self.patches], dtype=np.int64)

    @cached_property
    def patch_splits(self) -> np.ndarray:
        sp = {im.image_id: im.split for im in self.images}
        return np.array([sp[p.image_id] for p in self.patches])

    @cached_property
    def holistic_matrix(self) -> np.ndarray:
        if not self.images:
            return np.zeros((0, self.feature_dim))
        return np.stack([im.holistic for im in self.images]).astype(np.float64)

    @cached_property
    def image_ids(self) -> np.ndarray:
        return np.array([im.image_id for im in self.images], dtype=np.int64)

    @cached_property
    def image_labels(self) -> np.ndarray:
        return np.array([im.scene_label for im in self.images], dtype=np.int64)

    @cached_property
    def image_splits(self) -> np.ndarray:
        return np.array([im.split for im in self.images])

    def levels(self) -> list[str]:
        present = set(self.patch_levels.tolist())
        return [lv for lv in LEVELS if lv in present]

    def patch_rows(self, level=None, split=None) -> np.ndarray:
        """Row indices into ``patches`` filtered by level and/or split."""
        mask = np.ones(len(self.patches), dtype=bool)
        if level is not None:
            mask &= self.patch_levels == level
        if split is not None:
            mask &= self.patch_splits == split
        return np.flatnonzero(mask)

    def image_rows(self, split=None) -> np.ndarray:
        if split is None:
            return np.arange(len(self.images))
        return np.flatnonzero(self.image_splits == split)


def validate_dataset(ds: Dataset) -> ValidationReport:
    """List every invariant violation in ``ds``; never raises."""
    report = ValidationReport()
    out = report.violations
    d = ds.feature_dim

    if not ds.images:
        out.append("empty dataset: no images")

    image_ids: dict[int, ImageRecord] = {}
    for im in ds.images:
        if im.image_id in image_ids:
            out.append(f"duplicate image_id {im.image_id}")
        image_ids[im.image_id] = im

    patch_owner: dict[int, int] = {}
    for p in ds.patches:
        if p.patch_id in patch_owner:
            out.append(f"duplicate patch_id {p.patch_id}")
        patch_owner[p.patch_id] = p.image_id
        f = np.asarray(p.feature)
        if f.ndim != 1 or f.shape[0] != d:
            out.append(f"dimension mismatch: patch {p.patch_id} has shape {f.shape}, expected ({d},)")
        elif not np.all(np.isfinite(f)):
            out.append(f"non-finite feature in patch {p.patch_id}")
        if p.image_id not in image_ids:
            out.append(f"dangling image_id {p.image_id} in patch {p.patch_id}")
        cx, cy, w, h = p.bbox
        if not (0 <= cx <= 1 and 0 <= cy <= 1 and 0 < w <= 1 and 0 < h <= 1):
            out.append(f"bbox out of range in patch {p.patch_id}: {p.bbox}")
        if p.level not in LEVELS:
            out.append(f"unknown level {p.level!r} in patch {p.patch_id}")

    claimed: dict[int, int] = {}
    train_labels = set()
    for im in ds.images:
        h = np.asarray(im.holistic)
        if h.ndim != 1 or h.shape[0] != d:
            out.append(f"dimension mismatch: holistic of image {im.image_id} has shape {h.shape}, expected ({d},)")
        elif not np.all(np.isfinite(h)):
            out.append(f"non-finite holistic feature in image {im.image_id}")
        if not 0 <= im.scene_label < ds.num_classes:
            out.append(f"label {im.scene_label} of image {im.image_id} outside [0, {ds.num_classes})")
        if im.split not in SPLITS:
            out.append(f"unknown split {im.split!r} for image {im.image_id}")
        elif im.split == "train":
            train_labels.add(im.scene_label)
        if not im.patches:
            out.append(f"image {im.image_id} has no patches")
        for pid in im.patches:
            if pid not in patch_owner:
                out.append(f"dangling patch_id {pid} in image {im.image_id}")
            elif patch_owner[pid] != im.image_id:
                out.append(f"patch {pid} listed by image {im.image_id} but belongs to image {patch_owner[pid]}")
            if pid in claimed and claimed[pid] != im.image_id:
                out.append(f"patch {pid} shared between images {claimed[pid]} and {im.image_id}")
            claimed[pid] = im.image_id

    for pid, iid in patch_owner.items():
        if iid in image_ids and pid not in claimed:
            out.append(f"patch {pid} not listed by its image {iid}")

    if ds.images:
        missing = sorted(set(range(ds.num_classes)) - train_labels)
        if missing:
            out.append(f"label gap: classes {missing} absent from the training split")
    return report


def stack_features(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Stack equally sized vectors into an ``(n, d)`` float64 matrix."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"expected a 2-d feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("feature matrix contains non-finite entries")
    return X
