import json

import pytest

from concept_forgetting import pipeline
from concept_forgetting.cli import main


@pytest.fixture(scope="module")
def features(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "features"
    assert main(["synth", "--out", str(root), "--drift", "rotation", "--d", "16", "--n-atoms", "16",
                 "--k-true", "2", "--n-train", "1200", "--n-test", "400"]) == 0
    return root


def _last_json(capsys):
    return json.loads(capsys.readouterr().out)


def test_synth_and_train_and_translate(features, tmp_path, capsys):
    capsys.readouterr()
    assert main(["train-sae", "--features", str(features), "--out", str(tmp_path / "sae"), "--k", "4",
                 "--epochs", "2"]) == 0
    assert _last_json(capsys)["latent_dim"] == 32
    assert main(["translate", "--features", str(features), "--from-checkpoint", "1", "--kind", "closed_form",
                 "--out", str(tmp_path / "tr")]) == 0
    assert _last_json(capsys)["val_mse"] < 1e-6


def test_analyze_with_config_file_and_override(features, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"features_root": str(features), "out_dir": str(tmp_path / "x"),
                               "sae": {"k": 4, "epochs": 2}, "tau": 0.5, "ms": False}))
    out = tmp_path / "run"
    capsys.readouterr()
    assert main(["analyze", "--config", str(cfg), "--tau", "0.05", "--out", str(out), "--epochs", "3"]) == 0
    summary = _last_json(capsys)
    report = json.loads((out / pipeline.REPORT_NAME).read_text())
    assert report["config"]["tau"] == 0.05 and report["config"]["sae"] == {"k": 4, "epochs": 3}
    assert summary["pairs"][0]["deletion_ratio"] == report["pairs"][0]["metrics"]["deletion_ratio"]
    assert main(["report", "--report", str(out / pipeline.REPORT_NAME), "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "t" / "deletion.csv").exists()


def test_missing_input_exit_2(tmp_path, capsys):
    assert main(["analyze", "--features", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "input" and "nope" in err["message"]
    assert not (tmp_path / "o" / pipeline.REPORT_NAME).exists()


def test_bad_report_exit_4(tmp_path, capsys):
    bad = tmp_path / "r.json"
    bad.write_text(json.dumps({"schema_version": 9, "kind": "analysis"}))
    assert main(["report", "--report", str(bad)]) == 4
    assert json.loads(capsys.readouterr().err)["error"] == "schema"


def test_sweep_cli(features, tmp_path, capsys):
    capsys.readouterr()
    assert main(["sweep", "--features", str(features), "--out", str(tmp_path), "--k-grid", "4",
                 "--batch-grid", "32", "--tau-grid", "0.05,0.1", "--epochs", "2", "--no-ms"]) == 0
    assert _last_json(capsys) == {"report": str(tmp_path / pipeline.SWEEP_REPORT_NAME), "cells": 1,
                                  "failed_cells": []}
