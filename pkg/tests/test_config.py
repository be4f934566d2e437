import json

import pytest

from metaobject.config import (ABLATIONS, STAGES, PipelineConfig, load_config, parse_override, screening_split)
from metaobject.core import ConfigError
from metaobject.synthetic import SynthSpec


def test_defaults_validate_and_round_trip():
    cfg = PipelineConfig().validate()
    back = PipelineConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
    assert cfg.level_names == ("bottom", "top")


def test_unknown_field_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        PipelineConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize("change", [
    {"levels": 3}, {"nu": 0.0}, {"kernel": "poly"}, {"pooling": "fisher"}, {"K": 0},
    {"beta_grid": ()}, {"discard_ratio": 1.0}, {"clusters": {"bottom": 1, "top": 30}},
    {"synth": None}, {"holdout_fraction": 0.0},
])
def test_invalid_values(change):
    with pytest.raises(ConfigError):
        PipelineConfig().replace(**change).validate()


def test_dataset_xor_synth():
    with pytest.raises(ConfigError):
        PipelineConfig(dataset="x.txt").validate()
    PipelineConfig(dataset="x.txt", synth=None).validate()


def test_ablations():
    cfg = PipelineConfig()
    assert cfg.with_ablation("no-screen").use_cascade is False
    assert cfg.with_ablation("no-screen").use_knn is False
    assert cfg.with_ablation("rim-direct").use_finetune is False
    assert set(ABLATIONS) == {"no-screen", "no-cascade", "no-knn", "no-cluster", "rim-direct", "global-only"}
    with pytest.raises(ConfigError, match="unknown ablation"):
        cfg.with_ablation("nope")


def test_stage_hash_scoping():
    cfg = PipelineConfig()
    other = cfg.replace(scene_epochs=5)
    for s in STAGES:
        same = cfg.stage_hash(s) == other.stage_hash(s)
        assert same == (STAGES.index(s) < STAGES.index("train"))
    knn = cfg.replace(K=7)
    assert knn.stage_hash("cascade") == cfg.stage_hash("cascade")
    assert knn.stage_hash("screen") != cfg.stage_hash("screen")
    assert knn.stage_hash("eval") != cfg.stage_hash("eval")
    seeded = cfg.replace(synth=SynthSpec(seed=9))
    assert seeded.stage_hash("ingest") != cfg.stage_hash("ingest")
    with pytest.raises(ConfigError):
        cfg.stage_hash("bogus")


def test_overrides():
    cfg = PipelineConfig()
    assert parse_override(cfg, "K=12").K == 12
    assert parse_override(cfg, "synth.seed=4").synth.seed == 4
    assert parse_override(cfg, "clusters.top=12").clusters == {"bottom": 32, "top": 12}
    assert parse_override(cfg, "pooling=spm").pooling == "spm"
    with pytest.raises(ConfigError):
        parse_override(cfg, "K")
    with pytest.raises(ConfigError):
        parse_override(cfg, "pooling=nope")


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"K": 9, "synth": {"seed": 3}}))
    cfg = load_config(p)
    assert cfg.K == 9 and cfg.synth.seed == 3
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(p)


@pytest.mark.parametrize("total", [0.0, 0.1, 0.3, 0.386, 0.5, 0.7])
def test_screening_split_realizes_total(total):
    cfg = PipelineConfig()
    ch = screening_split(total, cfg)
    c = cfg.replace(**ch)
    kept = 1.0
    if c.use_cascade:
        kept *= (1 - c.per_stage_fraction) ** c.cascade_stages
    if c.use_knn:
        kept *= 1 - c.discard_ratio
    assert abs((1 - kept) - total) < 1e-5
    with pytest.raises(ConfigError):
        screening_split(1.0, cfg)
