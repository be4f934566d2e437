"""Synthetic datasets with planted meta objects.

Every scene class owns a few *discriminative* objects (Gaussian blobs around
class-unique unit centers); *shared* objects appear in every class and
*outliers* are uniform on the sphere. Each object also has a loose spatial
prior so region centers carry layout signal. The generator returns the
dataset together with a :class:`GroundTruth` that pipeline stages never see.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError, Dataset, ImageRecord, LEVELS, PatchRecord, l2_normalize

KIND_DISCRIMINATIVE = 0
KIND_SHARED = 1
KIND_OUTLIER = 2
KIND_NAMES = ("discriminative", "shared", "outlier")


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    discriminative_objects_per_class: int = 3
    shared_objects: int = 2
    outlier_fraction: float = 0.3
    patches_per_image: int = 10
    images_per_class: int = 40
    feature_dim: int = 64
    blob_sigma: float = 0.05
    seed: int = 0
    levels: tuple[str, ...] = LEVELS
    holistic_noise: float = 3.0
    train_fraction: float = 0.8
    spatial_sigma: float = 0.12

    def validate(self):
        for name in ("num_classes", "discriminative_objects_per_class", "patches_per_image",
                     "images_per_class", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"SynthSpec.{name} must be >= 1")
        if self.shared_objects < 0:
            raise ConfigError("SynthSpec.shared_objects must be >= 0")
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigError("SynthSpec.outlier_fraction must lie in [0, 1)")
        if not self.blob_sigma > 0:
            raise ConfigError("SynthSpec.blob_sigma must be > 0")
        if self.holistic_noise < 0 or self.spatial_sigma < 0:
            raise ConfigError("SynthSpec noise levels must be >= 0")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("SynthSpec.train_fraction must lie in (0, 1)")
        if not self.levels or any(lv not in LEVELS for lv in self.levels):
            raise ConfigError(f"SynthSpec.levels must be a non-empty subset of {LEVELS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "levels" in d:
            d["levels"] = tuple(d["levels"])
        return cls(**d)


@dataclass
class GroundTruth:
    """Per-patch planted labels, aligned with ``Dataset.patches``."""

    patch_ids: np.ndarray
    object_id: np.ndarray  # -1 for outliers
    kind: np.ndarray  # KIND_* codes
    object_class: np.ndarray  # owning class of a discriminative object, else -1
    centers: np.ndarray  # (num_objects, d)
    center_kind: np.ndarray
    center_class: np.ndarray
    center_level: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="<U6"))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **{k: getattr(self, k) for k in self.__dataclass_fields__})
        return path

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with np.load(path, allow_pickle=False) as z:
            return cls(**{k: z[k] for k in cls.__dataclass_fields__})


def _draw_centers(rng, count, d, min_dist):
    for _ in range(1000):
        c = l2_normalize(rng.standard_normal((count, d)))
        if count < 2:
            return c
        g = c @ c.T
        d2 = np.clip(2.0 - 2.0 * g, 0.0, None)
        np.fill_diagonal(d2, np.inf)
        if np.sqrt(d2.min()) > min_dist:
            return c
    raise ConfigError("could not draw well separated object centers; lower blob_sigma or raise feature_dim")


def generate_synthetic(spec: SynthSpec) -> tuple[Dataset, GroundTruth]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes
    k_disc = spec.discriminative_objects_per_class
    k_shared = spec.shared_objects
    d = spec.feature_dim
    per_level = C * k_disc + k_shared
    n_levels = len(spec.levels)

    centers = _draw_centers(rng, per_level * n_levels, d, 6.0 * spec.blob_sigma)
    center_kind = np.tile(np.r_[np.full(C * k_disc, KIND_DISCRIMINATIVE), np.full(k_shared, KIND_SHARED)], n_levels)
    center_class = np.tile(np.r_[np.repeat(np.arange(C), k_disc), np.full(k_shared, -1)], n_levels)
    center_level = np.repeat(np.array(spec.levels), per_level)
    spatial_mean = rng.uniform(0.15, 0.85, size=(per_level * n_levels, 2))
    size_range = {"bottom": (0.05, 0.3), "top": (0.3, 0.7)}

    n_train = int(round(spec.train_fraction * spec.images_per_class))
    n_train = min(max(n_train, 1), spec.images_per_class - 1) if spec.images_per_class > 1 else 1

    images, patches = [], []
    gt_obj, gt_kind, gt_cls = [], [], []
    pid = 0
    for c in range(C):
        for j in range(spec.images_per_class):
            iid = len(images)
            split = "train" if j < n_train else "test"
            members, feats = [], []
            for li, level in enumerate(spec.levels):
                base = li * per_level
                candidates = np.r_[base + c * k_disc + np.arange(k_disc), base + C * k_disc + np.arange(k_shared)]
                m = spec.patches_per_image
                is_out = rng.random(m) < spec.outlier_fraction
                pick = candidates[rng.integers(0, len(candidates), size=m)]
                noise = rng.standard_normal((m, d))
                pos_noise = rng.standard_normal((m, 2))
                lo, hi = size_range[level]
                sizes = rng.uniform(lo, hi, size=(m, 2))
                out_pos = rng.uniform(0.0, 1.0, size=(m, 2))
                for t in range(m):
                    if is_out[t]:
                        f = l2_normalize(noise[t])
                        pos = out_pos[t]
                        gt_obj.append(-1)
                        gt_kind.append(KIND_OUTLIER)
                        gt_cls.append(-1)
                    else:
                        o = int(pick[t])
                        f = l2_normalize(centers[o] + spec.blob_sigma * noise[t])
                        pos = np.clip(spatial_mean[o] + spec.spatial_sigma * pos_noise[t], 0.0, 1.0)
                        gt_obj.append(o)
                        gt_kind.append(int(center_kind[o]))
                        gt_cls.append(int(center_class[o]))
                    bbox = (float(pos[0]), float(pos[1]), float(sizes[t, 0]), float(sizes[t, 1]))
                    patches.append(PatchRecord(pid, iid, f, bbox, level))
                    members.append(pid)
                    feats.append(f)
                    pid += 1
            mean = l2_normalize(np.mean(feats, axis=0))
            holistic = l2_normalize(mean + spec.holistic_noise * rng.standard_normal(d) / np.sqrt(d))
            images.append(ImageRecord(iid, c, tuple(members), holistic, split))

    ds = Dataset(images=tuple(images), patches=tuple(patches), num_classes=C, feature_dim=d)
    gt = GroundTruth(
        patch_ids=np.arange(pid, dtype=np.int64),
        object_id=np.array(gt_obj, dtype=np.int64),
        kind=np.array(gt_kind, dtype=np.int64),
        object_class=np.array(gt_cls, dtype=np.int64),
        centers=centers,
        center_kind=center_kind.astype(np.int64),
        center_class=center_class.astype(np.int64),
        center_level=center_level,
    )
    return ds, gt


def load_synth_spec(path) -> SynthSpec:
    with open(path, encoding="utf-8") as fh:
        return SynthSpec.from_dict(json.load(fh))
