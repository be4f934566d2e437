"""Pipeline configuration, canonical serialization and per-stage hashes."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cache import config_hash
from .core import ConfigError
from .synthetic import SynthSpec

STAGES = ("ingest", "cascade", "screen", "cluster", "train-meta", "pool", "train", "eval")

POOLING_MODES = ("vlad", "spm", "both")

# bumped whenever a stage's payload layout or semantics change, so stale entries miss
CACHE_VERSION = 3

ABLATIONS = {
    "no-screen": {"use_cascade": False, "use_knn": False},
    "no-cascade": {"use_cascade": False},
    "no-knn": {"use_knn": False},
    "no-cluster": {"use_cluster": False},
    "rim-direct": {"use_finetune": False},
    "global-only": {"use_pooled": False},
}

# fields read by each stage; a stage's hash covers its own fields and every upstream stage's
STAGE_FIELDS = {
    "ingest": ("dataset", "synth"),
    "cascade": ("levels", "use_cascade", "cascade_stages", "per_stage_fraction", "nu", "kernel", "gamma"),
    "screen": ("use_knn", "K", "discard_ratio"),
    "cluster": ("use_cluster", "clusters", "lam", "restarts", "seed", "jitter_copies", "jitter_sigma"),
    "train-meta": ("use_finetune", "background_ratio", "meta_hidden", "meta_epochs", "meta_lr", "smoothing"),
    "pool": ("use_pooled", "pooling", "background_threshold"),
    "train": ("beta_grid", "scene_epochs", "scene_lr", "scene_batch", "holdout_fraction"),
    "eval": (),
}


@dataclass
class PipelineConfig:
    dataset: str | None = None
    synth: SynthSpec | None = field(default_factory=SynthSpec)
    levels: int = 2
    clusters: dict = field(default_factory=lambda: {"bottom": 32, "top": 32})
    use_cascade: bool = True
    cascade_stages: int = 3
    per_stage_fraction: float = 0.15
    nu: float = 0.15
    kernel: str = "linear"
    gamma: float | None = None
    use_knn: bool = True
    K: int = 100
    discard_ratio: float = 0.16
    use_cluster: bool = True
    lam: float = 1e-4
    restarts: int = 3
    seed: int = 0
    jitter_copies: int = 0
    jitter_sigma: float = 0.0
    use_finetune: bool = True
    background_ratio: float = 0.25
    meta_hidden: int = 256
    meta_epochs: int = 30
    meta_lr: float = 1e-3
    smoothing: float = 0.05
    use_pooled: bool = True
    pooling: str = "vlad"
    background_threshold: float | None = None
    beta_grid: tuple = tuple(round(0.1 * i, 1) for i in range(1, 10))
    scene_epochs: int = 200
    scene_lr: float = 1e-3
    scene_batch: int = 64
    holdout_fraction: float = 0.2

    def validate(self) -> "PipelineConfig":
        if (self.dataset is None) == (self.synth is None):
            raise ConfigError("exactly one of dataset and synth must be set")
        if self.levels not in (1, 2):
            raise ConfigError("levels must be 1 or 2")
        for name in ("per_stage_fraction",):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        for name in ("discard_ratio", "background_ratio"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if not 0 < self.nu <= 1:
            raise ConfigError("nu must lie in (0, 1]")
        if self.kernel not in ("linear", "rbf"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        if self.K < 1 or self.cascade_stages < 1 or self.restarts < 1:
            raise ConfigError("K, cascade_stages and restarts must be >= 1")
        if not self.beta_grid or any(not 0 <= b <= 1 for b in self.beta_grid):
            raise ConfigError("beta_grid must be a nonempty list of values in [0, 1]")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        for lv in self.level_names:
            if int(self.clusters.get(lv, 0)) < 2:
                raise ConfigError(f"clusters[{lv!r}] must be >= 2")
        if self.synth is not None:
            self.synth.validate()
        return self

    @property
    def level_names(self) -> tuple[str, ...]:
        return ("bottom", "top")[: self.levels]

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["synth"] = self.synth.to_dict() if self.synth is not None else None
        d["beta_grid"] = [float(b) for b in self.beta_grid]
        d["clusters"] = {k: int(v) for k, v in sorted(self.clusters.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if d.get("synth") is not None and not isinstance(d["synth"], SynthSpec):
            d["synth"] = SynthSpec.from_dict(d["synth"])
        if "beta_grid" in d:
            d["beta_grid"] = tuple(float(b) for b in d["beta_grid"])
        if d.get("dataset") is not None and "synth" not in d:
            d["synth"] = None
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def with_ablation(self, name: str) -> "PipelineConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return self.replace(**ABLATIONS[name])

    def stage_hash(self, stage: str) -> str:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        full = self.to_dict()
        fields = {"_cache_version": CACHE_VERSION}
        for s in STAGES[: STAGES.index(stage) + 1]:
            for name in STAGE_FIELDS[s]:
                fields[name] = full[name]
        return config_hash(fields)


def load_config(path) -> PipelineConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return PipelineConfig.from_dict(raw).validate()


def parse_override(cfg: PipelineConfig, item: str) -> PipelineConfig:
    """Apply one ``key=value`` override; the value is parsed as JSON when possible."""
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    d = cfg.to_dict()
    if key.startswith("synth."):
        if d["synth"] is None:
            raise ConfigError("config has no synth spec to override")
        d["synth"][key[6:]] = value
    elif key.startswith("clusters."):
        d["clusters"][key[9:]] = int(value)
    else:
        d[key] = value
    return PipelineConfig.from_dict(d).validate()


def screening_split(total: float, cfg: PipelineConfig) -> dict:
    """Config changes that realize a total screening ratio ``total``.

    0 turns both screens off. Below the cascade's own removal the cascade
    per-stage fraction is rescaled and kNN screening is off; above it the
    cascade keeps its default and kNN discards the remainder.
    """
    if not 0 <= total < 1:
        raise ConfigError("screening ratio must lie in [0, 1)")
    if total == 0:
        return {"use_cascade": False, "use_knn": False}
    stages = cfg.cascade_stages
    cascade_total = 1.0 - (1.0 - cfg.per_stage_fraction) ** stages
    if total <= cascade_total:
        f = 1.0 - (1.0 - total) ** (1.0 / stages)
        return {"use_cascade": True, "use_knn": False, "per_stage_fraction": round(f, 6)}
    r = 1.0 - (1.0 - total) / (1.0 - cascade_total)
    return {"use_cascade": True, "use_knn": True, "discard_ratio": round(r, 6)}
