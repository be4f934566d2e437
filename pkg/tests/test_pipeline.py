import csv

import numpy as np
import pytest

from metaobject.cache import MissingCacheError
from metaobject.config import STAGES, PipelineConfig
from metaobject.core import ConfigError
from metaobject.pipeline import Pipeline, run_ablation, run_pipeline, run_sweep, sweep_config
from metaobject.synthetic import SynthSpec

TINY_SYNTH = SynthSpec(num_classes=3, images_per_class=10, patches_per_image=10, feature_dim=16,
                       discriminative_objects_per_class=2, shared_objects=1, seed=1)


def tiny_config(**changes) -> PipelineConfig:
    cfg = PipelineConfig(synth=TINY_SYNTH, clusters={"bottom": 6, "top": 6}, K=10, restarts=1,
                         meta_hidden=16, meta_epochs=5, scene_epochs=20, scene_batch=16,
                         beta_grid=(0.3, 0.7), holdout_fraction=0.3)
    return cfg.replace(**changes).validate()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    p = run_pipeline(tiny_config(), root / "run", root / "cache")
    return root, p


def test_full_run_outputs(tiny_run):
    root, p = tiny_run
    assert [e[0] for e in p.events] == list(STAGES)
    assert all(e[1] == "computed" for e in p.events)
    for name in ("config.json", "eval.csv", "confusion.csv", "weights_hist.csv"):
        assert (root / "run" / name).exists()
    rep = p.report()
    assert rep.confusion.sum() == 3 * 2
    assert 0.0 <= rep.accuracy <= 1.0


def test_rerun_is_fully_cached_and_identical(tiny_run):
    root, p = tiny_run
    q = run_pipeline(tiny_config(), root / "run2", root / "cache")
    assert all(e[1] == "cached" for e in q.events)
    np.testing.assert_array_equal(q.report().predictions, p.report().predictions)


def test_downstream_change_reuses_upstream(tiny_run):
    root, _ = tiny_run
    q = run_pipeline(tiny_config(scene_epochs=3), root / "run3", root / "cache")
    status = dict((s, st) for s, st, _ in q.events)
    assert all(status[s] == "cached" for s in STAGES[:STAGES.index("train")])
    assert status["train"] == "computed" and status["eval"] == "computed"


def test_fresh_cache_is_deterministic(tiny_run, tmp_path):
    _, p = tiny_run
    q = run_pipeline(tiny_config(), tmp_path / "run", tmp_path / "cache")
    np.testing.assert_array_equal(q.report().confusion, p.report().confusion)
    a = np.asarray(p.load("pool")["blocks"][0])
    b = np.asarray(q.load("pool")["blocks"][0])
    np.testing.assert_array_equal(a, b)


def test_missing_upstream_stage(tmp_path):
    p = Pipeline(tiny_config(), tmp_path / "run", tmp_path / "cache")
    with pytest.raises(MissingCacheError, match="run stage 'ingest' first"):
        p.run_stage("cascade")
    with pytest.raises(ConfigError):
        p.run_stage("bogus")


def test_global_only_has_holistic_dim(tiny_run):
    root, _ = tiny_run
    q = run_pipeline(tiny_config().with_ablation("global-only"), root / "g", root / "cache")
    assert q.load("eval")["fused_dim"] == TINY_SYNTH.feature_dim
    assert q.load("train")["beta"] == 0.0


@pytest.mark.parametrize("name", ["no-screen", "no-cluster", "rim-direct"])
def test_ablations_run(tiny_run, name):
    root, _ = tiny_run
    full, abl = run_ablation(name, tiny_config(), root / "abl", root / "cache")
    assert full.confusion.sum() == abl.confusion.sum()


def test_no_screen_keeps_everything(tiny_run):
    root, _ = tiny_run
    q = run_pipeline(tiny_config().with_ablation("no-screen"), root / "ns", root / "cache", until="screen")
    casc = q.load("cascade")
    assert len(casc["removed"]) == 0 and len(casc["kept"]) == casc["n_input"]


def test_layout_matches_blocks(tiny_run):
    _, p = tiny_run
    pool = p.load("pool")
    assert [np.asarray(b).shape[1] for b in pool["blocks"]] == list(pool["layout"])
    assert pool["layout"][-1] == TINY_SYNTH.feature_dim


def test_sweep_writes_sorted_csv(tiny_run):
    root, _ = tiny_run
    rows = run_sweep("num_clusters", [8, 4], tiny_config(), root / "sw", root / "cache")
    assert [r[0] for r in rows] == [4.0, 8.0]
    with open(root / "sw" / "sweep_num_clusters.csv") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["num_clusters", "accuracy"] and [g[0] for g in got[1:]] == ["4", "8"]
    with pytest.raises(ConfigError):
        run_sweep("bogus", [1], tiny_config(), root / "sw")


def test_sweep_config_screening():
    cfg = tiny_config()
    assert sweep_config(cfg, "screening_ratio", 0).use_cascade is False
    assert sweep_config(cfg, "num_clusters", 9).clusters == {"bottom": 9, "top": 9}
