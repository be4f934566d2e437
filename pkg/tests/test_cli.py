import json

import numpy as np
import pytest

from metaobject.cli import build_parser, main
from metaobject.ingest import load_dataset
from metaobject.synthetic import GroundTruth

from test_pipeline import tiny_config


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(tiny_config().to_json())
    return p


def test_run_chain_then_cached(cfg_file, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["run", "--config", str(cfg_file), "--run-dir", str(run)]) == 0
    out = capsys.readouterr().out
    assert "computed" in out and "accuracy" in out
    assert (run / "eval.csv").exists() and (run / "confusion.csv").exists()
    assert main(["run", "--config", str(cfg_file), "--run-dir", str(run), "--stage", "eval"]) == 0
    assert "eval       cached" in capsys.readouterr().out


def test_run_stage_without_upstream_fails(cfg_file, tmp_path, capsys):
    code = main(["run", "--config", str(cfg_file), "--run-dir", str(tmp_path / "r"), "--stage", "screen"])
    assert code == 2
    assert "run stage 'ingest' first" in capsys.readouterr().err


def test_override_and_bad_override(cfg_file, tmp_path, capsys):
    args = ["run", "--config", str(cfg_file), "--run-dir", str(tmp_path / "r"), "--until", "ingest",
            "--set", "synth.seed=5"]
    assert main(args) == 0
    assert main(args[:-1] + ["nu=3"]) == 2
    assert "nu" in capsys.readouterr().err


def test_ablate_and_sweep(cfg_file, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--name", "global-only", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert "global-only" in capsys.readouterr().out
    sw = tmp_path / "sw"
    assert main(["sweep", "--axis", "screening_ratio", "--values", "0.4,0", "--config", str(cfg_file),
                 "--out", str(sw)]) == 0
    lines = (sw / "sweep_screening_ratio.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines] == ["screening_ratio", "0", "0.4"]
    assert main(["sweep", "--axis", "num_clusters", "--values", "a,b", "--config", str(cfg_file),
                 "--out", str(sw)]) == 2


def test_unknown_ablation_rejected():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["ablate", "--name", "nope"])


def test_synth_writes_dataset_and_sidecar(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_classes": 2, "images_per_class": 3, "patches_per_image": 4,
                                "feature_dim": 8, "seed": 1}))
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 0
    ds = load_dataset(tmp_path / "d" / "synthetic.manifest")
    gt = GroundTruth.load(tmp_path / "d" / "synthetic_ground_truth.npz")
    assert len(gt.patch_ids) == len(ds.patches) == 2 * 3 * 4 * 2
    np.testing.assert_array_equal(gt.patch_ids, ds.patch_ids)
