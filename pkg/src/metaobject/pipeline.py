"""Cached, stage-by-stage pipeline: ingest -> cascade -> screen -> cluster ->
train-meta -> pool -> train -> eval.

Every stage output is stored in a content-addressed cache entry named by the
stage and the hash of the config fields it depends on (its own and all
upstream fields), so runs that share upstream settings share cache entries.
"""

from __future__ import annotations

import csv
import logging
import time
from pathlib import Path

import numpy as np

from .cache import MissingCacheError, StageCache
from .classifier import (EvalReport, SceneClassifier, cross_validate_beta, evaluate, fuse_blocks,
                         train_scene_classifier, write_confusion_csv, write_eval_csv)
from .config import STAGES, PipelineConfig, screening_split
from .core import ConfigError
from .ingest import load_dataset
from .metaclassifier import (BACKGROUND, MetaClassifier, build_meta_training_set, classify_regions,
                             nearest_exemplar_labels, rim_direct_labels, train_meta_classifier)
from .ocsvm import KernelSpec, cascade_screen
from .pooling import fit_vlad_pca, spm_encode, vlad_encode
from .rim import ClusterAssignment, RimModel, assign_clusters, jitter_augment, train_rim
from .screening import (PatchWeights, ScreenedSet, compute_patch_weights, soft_screen,
                        weight_histogram, write_histogram_csv)
from .synthetic import generate_synthetic

log = logging.getLogger(__name__)


def _ids_to_rows(index: dict, ids) -> np.ndarray:
    return np.array([index[int(p)] for p in ids], dtype=np.int64)


class Pipeline:
    """Runs stages for one config, reading and writing a (possibly shared) cache.

    ``events`` collects ``(stage, status, seconds)`` with status ``"cached"``
    or ``"computed"``.
    """

    def __init__(self, cfg: PipelineConfig, run_dir, cache_dir=None):
        self.cfg = cfg.validate()
        self.run_dir = Path(run_dir)
        self.cache = StageCache(Path(cache_dir) if cache_dir is not None else self.run_dir / "cache")
        self.events: list[tuple[str, str, float]] = []
        self._memo: dict[str, dict] = {}

    # cache plumbing

    def entry(self, stage: str) -> str:
        return f"{stage}-{self.cfg.stage_hash(stage)}"

    def is_cached(self, stage: str) -> bool:
        return self.cache.exists(self.entry(stage))

    def load(self, stage: str) -> dict:
        if stage not in self._memo:
            try:
                self._memo[stage] = self.cache.read(self.entry(stage), self.cfg.stage_hash(stage))
            except MissingCacheError:
                raise MissingCacheError(
                    f"no cached output of stage {stage!r} for this config; run stage {stage!r} first"
                ) from None
        return self._memo[stage]

    def run_stage(self, stage: str) -> dict:
        """Run one stage, reusing its cache entry when present.

        Upstream stages must already be cached.
        """
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
        t0 = time.perf_counter()
        if self.is_cached(stage):
            payload = self.load(stage)
            status = "cached"
        else:
            upstream = STAGES[: STAGES.index(stage)]
            for s in upstream:
                if not self.is_cached(s):
                    raise MissingCacheError(
                        f"stage {stage!r} needs the output of stage {s!r}; run stage {s!r} first"
                    )
            payload = getattr(self, "_stage_" + stage.replace("-", "_"))()
            self.cache.write(self.entry(stage), payload, self.cfg.stage_hash(stage))
            self._memo[stage] = payload
            status = "computed"
        dt = time.perf_counter() - t0
        self.events.append((stage, status, dt))
        log.info("stage %-10s %-8s %6.2fs  %s", stage, status, dt, payload.get("summary", ""))
        if stage == "eval":
            self._write_outputs()
        return payload

    def run(self, until: str = "eval") -> dict:
        payload = {}
        for s in STAGES[: STAGES.index(until) + 1]:
            payload = self.run_stage(s)
        return payload

    def report(self) -> EvalReport:
        return EvalReport.from_dict(self.load("eval")["report"])

    # stages

    def _tables(self) -> dict:
        return self.load("ingest")

    def _stage_ingest(self) -> dict:
        if self.cfg.dataset is not None:
            ds = load_dataset(self.cfg.dataset)
        else:
            ds, _ = generate_synthetic(self.cfg.synth)
        return {
            "X": ds.patch_matrix, "pid": ds.patch_ids, "iid": ds.patch_image_ids,
            "level": ds.patch_levels.astype(str), "bbox": ds.patch_bboxes, "label": ds.patch_labels,
            "split": ds.patch_splits.astype(str), "H": ds.holistic_matrix, "img_ids": ds.image_ids,
            "img_labels": ds.image_labels, "img_splits": ds.image_splits.astype(str),
            "num_classes": ds.num_classes, "feature_dim": ds.feature_dim,
            "summary": f"{len(ds.patches)} patches, {len(ds.images)} images",
        }

    def _train_level_rows(self, lv: str) -> np.ndarray:
        t = self._tables()
        return np.flatnonzero((t["level"] == lv) & (t["split"] == "train"))

    def _stage_cascade(self) -> dict:
        cfg, t = self.cfg, self._tables()
        kernel = KernelSpec(cfg.kernel, cfg.gamma)
        kept, removed, flags = [], [], []
        n_in = 0
        for lv in cfg.level_names:
            rows = self._train_level_rows(lv)
            n_in += len(rows)
            if not cfg.use_cascade:
                kept.append(t["pid"][rows])
                continue
            for c in np.unique(t["label"][rows]):
                r = rows[t["label"][rows] == c]
                res = cascade_screen(t["pid"][r], t["X"][r], cfg.cascade_stages, cfg.per_stage_fraction,
                                     cfg.nu, kernel)
                kept.append(res.kept)
                removed.extend(res.removed_per_stage)
                flags.extend(f"{lv}/class {c}: {f}" for f in res.flags)
        kept = np.sort(np.concatenate(kept)) if kept else np.zeros(0, np.int64)
        removed = np.sort(np.concatenate(removed)) if removed else np.zeros(0, np.int64)
        return {"kept": kept, "removed": removed, "flags": flags, "n_input": n_in,
                "summary": f"{n_in} train patches -> {len(kept)} kept"}

    def _stage_screen(self) -> dict:
        cfg, t = self.cfg, self._tables()
        casc = self.load("cascade")
        index = {int(p): i for i, p in enumerate(t["pid"])}
        rows = _ids_to_rows(index, casc["kept"])
        if not cfg.use_knn or cfg.discard_ratio == 0:
            s = ScreenedSet(casc["kept"], np.zeros(0, np.int64), 1.0 - len(rows) / max(casc["n_input"], 1))
            return {"screened": s.to_dict(), "weights": None, "summary": f"{len(rows)} kept (kNN off)"}
        pids, counts = [], []
        for lv in cfg.level_names:
            r = rows[t["level"][rows] == lv]
            w = compute_patch_weights(t["X"][r], t["pid"][r], t["iid"][r], t["label"][r], cfg.K)
            pids.append(w.patch_ids)
            counts.append(w.counts)
        weights = PatchWeights(np.concatenate(pids), np.concatenate(counts), cfg.K)
        s = soft_screen(weights, cfg.discard_ratio, reference_count=casc["n_input"])
        return {"screened": s.to_dict(), "weights": weights.to_dict(),
                "summary": f"{len(s.kept)} kept, {len(s.discarded)} discarded, "
                           f"total ratio {s.total_screening_ratio:.3f}"}

    def _kept_rows(self, lv: str) -> np.ndarray:
        t = self._tables()
        index = {int(p): i for i, p in enumerate(t["pid"])}
        kept = ScreenedSet.from_dict(self.load("screen")["screened"]).kept
        rows = _ids_to_rows(index, kept)
        return rows[t["level"][rows] == lv]

    def _screened_out_rows(self, lv: str) -> np.ndarray:
        t = self._tables()
        index = {int(p): i for i, p in enumerate(t["pid"])}
        out = np.r_[self.load("cascade")["removed"],
                    ScreenedSet.from_dict(self.load("screen")["screened"]).discarded].astype(np.int64)
        rows = np.sort(_ids_to_rows(index, out))
        return rows[t["level"][rows] == lv]

    def _stage_cluster(self) -> dict:
        cfg, t = self.cfg, self._tables()
        out = {}
        for li, lv in enumerate(cfg.level_names):
            rows = self._kept_rows(lv)
            N = int(cfg.clusters[lv])
            if not cfg.use_cluster:
                # every kept patch is its own visual word
                out[lv] = {"exemplars": t["pid"][rows]}
                continue
            X = t["X"][rows]
            Xtr = jitter_augment(X, cfg.jitter_copies, cfg.jitter_sigma, seed=cfg.seed + li)
            model = train_rim(Xtr, N, cfg.lam, cfg.restarts, seed=cfg.seed + li)
            a = assign_clusters(model, X)
            out[lv] = {"rim": model.to_dict(), "assignment": a.to_dict()}
        sizes = {lv: int((np.asarray(v["assignment"]["sizes"]) > 0).sum()) for lv, v in out.items()
                 if "assignment" in v}
        words = {lv: len(v["exemplars"]) for lv, v in out.items() if "exemplars" in v}
        return {"levels": out, "summary": f"non-empty clusters {sizes}" if sizes else f"exemplar words {words}"}

    def _stage_train_meta(self) -> dict:
        cfg, t = self.cfg, self._tables()
        out = {}
        for li, lv in enumerate(cfg.level_names):
            cl = self.load("cluster")["levels"][lv]
            if "rim" not in cl or not cfg.use_finetune:
                out[lv] = None
                continue
            kept, disc = self._kept_rows(lv), self._screened_out_rows(lv)
            screened = ScreenedSet(t["pid"][kept], t["pid"][disc], 0.0)
            rows = np.r_[kept, disc]
            ts = build_meta_training_set(screened, ClusterAssignment.from_dict(cl["assignment"]),
                                         t["pid"][rows], t["X"][rows], cfg.background_ratio, seed=cfg.seed + li)
            m = train_meta_classifier(ts, hidden=cfg.meta_hidden, epochs=cfg.meta_epochs, lr=cfg.meta_lr,
                                      seed=cfg.seed + li, smoothing=cfg.smoothing)
            out[lv] = m.to_dict()
        return {"levels": out, "summary": "region classifiers trained" if any(out.values()) else "skipped"}

    def _codebook(self, lv: str) -> tuple[np.ndarray, np.ndarray]:
        """Pooling centers and their active mask for one level."""
        cl = self.load("cluster")["levels"][lv]
        if "exemplars" in cl:
            t = self._tables()
            index = {int(p): i for i, p in enumerate(t["pid"])}
            C = t["X"][_ids_to_rows(index, cl["exemplars"])]
            return C, np.ones(len(C), dtype=bool)
        a = ClusterAssignment.from_dict(cl["assignment"])
        return a.cluster_centers, ~a.empty

    def _region_labels(self, lv: str, rows: np.ndarray) -> np.ndarray:
        """Meta-object labels in [0, N] (0 = background) for patch rows."""
        cfg, t = self.cfg, self._tables()
        X = t["X"][rows]
        cl = self.load("cluster")["levels"][lv]
        if "exemplars" in cl:
            # nearest training patch from another image: a kept patch gives its word
            # index, a screened-out one gives background
            kept, disc = self._kept_rows(lv), self._screened_out_rows(lv)
            ref = np.r_[kept, disc]
            ref_labels = np.r_[np.arange(1, len(kept) + 1), np.zeros(len(disc), np.int64)]
            return nearest_exemplar_labels(X, t["X"][ref], ref_labels,
                                           groups=t["iid"][rows], exemplar_groups=t["iid"][ref])
        meta = self.load("train-meta")["levels"][lv]
        if meta is None:
            rim = RimModel.from_dict(cl["rim"])
            return rim_direct_labels(rim, X, cfg.background_threshold)
        return classify_regions(MetaClassifier.from_dict(meta), X)

    def _stage_pool(self) -> dict:
        cfg, t = self.cfg, self._tables()
        n_img = len(t["img_ids"])
        img_index = {int(i): r for r, i in enumerate(t["img_ids"])}
        train_imgs = np.flatnonzero(t["img_splits"] == "train")
        blocks, layout, bg_frac = [], [], {}
        for lv in (cfg.level_names if cfg.use_pooled else ()):
            rows = np.flatnonzero(t["level"] == lv)
            labels = self._region_labels(lv, rows)
            centers, active = self._codebook(lv)
            cl = self.load("cluster")["levels"][lv]
            N = len(centers)
            bg_frac[lv] = float(np.mean(labels == BACKGROUND))
            img_of = np.array([img_index[int(i)] for i in t["iid"][rows]])
            per_image = [np.flatnonzero(img_of == r) for r in range(n_img)]
            parts = []
            if cfg.pooling in ("spm", "both"):
                centers_xy = t["bbox"][rows, :2]
                parts.append(np.vstack([spm_encode(centers_xy[idx], labels[idx], N) for idx in per_image]))
            if cfg.pooling in ("vlad", "both"):
                fg = [idx[labels[idx] != BACKGROUND] for idx in per_image]
                X = t["X"][rows]
                # words keep their leave-one-image-out assignment; meta objects use nearest center
                assign = [labels[idx] - 1 for idx in fg] if "exemplars" in cl else [None] * n_img
                pca = fit_vlad_pca([X[fg[r]] for r in train_imgs], centers, k=int(active.sum()), active=active,
                                   assignments=[assign[r] for r in train_imgs])
                for f in pca.flags:
                    log.debug("%s VLAD PCA: %s", lv, f)
                parts.append(np.vstack([vlad_encode(X[idx], centers, pca, active, a) for idx, a in zip(fg, assign)]))
            B = np.hstack(parts)
            blocks.append(B)
            layout.append(B.shape[1])
        blocks.append(t["H"])
        layout.append(t["H"].shape[1])
        return {"blocks": blocks, "layout": layout, "background_fraction": bg_frac,
                "summary": f"layout {layout}, background fraction {bg_frac}"}

    def _stage_train(self) -> dict:
        cfg, t = self.cfg, self._tables()
        pool = self.load("pool")
        train = np.flatnonzero(t["img_splits"] == "train")
        y = t["img_labels"][train]
        blocks = [np.asarray(b)[train] for b in pool["blocks"]]
        layout = tuple(int(v) for v in pool["layout"])
        kw = dict(epochs=cfg.scene_epochs, lr=cfg.scene_lr, batch_size=cfg.scene_batch)
        if len(blocks) == 1:
            beta, scores = 0.0, {}
        else:
            beta, scores = cross_validate_beta(blocks, y, cfg.beta_grid, seed=cfg.seed,
                                               fraction=cfg.holdout_fraction, **kw)
        model = train_scene_classifier(fuse_blocks(blocks, beta), y, layout, beta,
                                       n_classes=int(t["num_classes"]), seed=cfg.seed,
                                       config_hash=cfg.stage_hash("train"), **kw)
        return {"model": model.to_dict(), "beta": beta, "cv": {f"{b:g}": s for b, s in scores.items()},
                "summary": f"beta={beta:g}, final loss {model.net.final_loss:.4f}"}

    def _stage_eval(self) -> dict:
        t = self._tables()
        pool, tr = self.load("pool"), self.load("train")
        test = np.flatnonzero(t["img_splits"] == "test")
        model = SceneClassifier.from_dict(tr["model"])
        X = fuse_blocks([np.asarray(b)[test] for b in pool["blocks"]], tr["beta"])
        rep = evaluate(model, X, t["img_labels"][test])
        return {"report": rep.to_dict(), "fused_dim": int(X.shape[1]), "summary": rep.summary()}

    # outputs

    def _write_outputs(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.json").write_text(self.cfg.to_json() + "\n", encoding="utf-8")
        rep = self.report()
        write_eval_csv(self.run_dir / "eval.csv", rep)
        write_confusion_csv(self.run_dir / "confusion.csv", rep)
        w = self.load("screen")["weights"]
        if w is not None:
            counts, edges = weight_histogram(PatchWeights.from_dict(w), bins=10)
            write_histogram_csv(self.run_dir / "weights_hist.csv", counts, edges)


def run_pipeline(cfg: PipelineConfig, run_dir, cache_dir=None, until: str = "eval") -> Pipeline:
    p = Pipeline(cfg, run_dir, cache_dir)
    p.run(until)
    return p


def run_ablation(name: str, cfg: PipelineConfig, out_dir, cache_dir=None) -> tuple[EvalReport, EvalReport]:
    """Full and ablated runs side by side; returns (full report, ablated report)."""
    ablated = cfg.with_ablation(name)
    out_dir = Path(out_dir)
    cache_dir = cache_dir or out_dir / "cache"
    full = run_pipeline(cfg, out_dir / "full", cache_dir)
    abl = run_pipeline(ablated, out_dir / name, cache_dir)
    log.info("ablation %s: full %.4f vs %s %.4f", name, full.report().accuracy, name, abl.report().accuracy)
    return full.report(), abl.report()


SWEEP_AXES = ("screening_ratio", "num_clusters")


def sweep_config(cfg: PipelineConfig, axis: str, value) -> PipelineConfig:
    if axis == "screening_ratio":
        return cfg.replace(**screening_split(float(value), cfg))
    if axis == "num_clusters":
        return cfg.replace(clusters={lv: int(value) for lv in cfg.clusters})
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def run_sweep(axis: str, values, cfg: PipelineConfig, out_dir, cache_dir=None) -> list[tuple[float, float]]:
    """One seeded run per value; writes ``sweep_<axis>.csv`` sorted by value."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    values = sorted(set(float(v) for v in values))
    if not values:
        raise ConfigError("sweep needs at least one value")
    out_dir = Path(out_dir)
    cache_dir = cache_dir or out_dir / "cache"
    rows = []
    for v in values:
        p = run_pipeline(sweep_config(cfg, axis, v), out_dir / f"{axis}={v:g}", cache_dir)
        rows.append((v, p.report().accuracy))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"sweep_{axis}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([axis, "accuracy"])
        for v, acc in rows:
            w.writerow([f"{v:g}", repr(acc)])
    return rows
