import json

import pytest
import yaml

from slicealign.cli import main

from conftest import TINY


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--subjects", "4", "--V", "8", "--size", "32", "--seed", "1", "--out", str(root / "data")]) == 0
    cfg = {}
    for item in TINY:
        key, value = item.split("=", 1)
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = yaml.safe_load(value)
    cfg["eval"] = {"k": 2, "Ms": [1]}
    (root / "tiny.yaml").write_text(yaml.safe_dump(cfg))
    return root


def run(workspace, *argv):
    return main([argv[0], "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data" / "manifest.yaml"), *argv[1:]])


def error_record(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--subjects", "2", "--V", "8", "--size", "16", "--seed", "5", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.yaml" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_rejects_single_subject(tmp_path, capsys):
    assert main(["synth", "--subjects", "1", "--out", str(tmp_path)]) == 2
    rec = error_record(capsys)
    assert rec["command"] == "synth" and "subjects" in rec["message"]


def test_pretrain_then_finetune_and_evaluate(workspace, capsys):
    out = workspace / "pre"
    assert run(workspace, "pretrain", "--out", str(out)) == 0
    ckpt = out / "checkpoints" / "pretrain.pt"
    assert ckpt.exists() and (out / "config.yaml").exists() and (out / "logs" / "pretrain.jsonl").exists()

    ft = workspace / "ft"
    assert run(workspace, "finetune", "--out", str(ft), "--init", str(ckpt), "--M", "1") == 0
    assert (ft / "checkpoints" / "finetune.pt").exists()

    ev = workspace / "ev"
    assert run(workspace, "evaluate", "--out", str(ev), "--method", "random", "--method", f"sal={ckpt}") == 0
    records = json.loads((ev / "results.json").read_text())
    assert [(r["method"], r["M"], len(r["folds"])) for r in records] == [("random", 1, 2), ("sal", 1, 2)]
    assert (ev / "results.csv").read_text().startswith("method,M,mean,std,folds")


def test_invalid_omega_override(workspace, capsys):
    out = workspace / "bad"
    assert run(workspace, "pretrain", "--out", str(out), "--set", "loss.omega=3") == 2
    rec = error_record(capsys)
    assert rec["error"] == "ConfigError" and "omega=3" in rec["message"]
    assert not (out / "checkpoints").exists()


def test_evaluate_budget_too_large(workspace, capsys):
    assert run(workspace, "evaluate", "--out", str(workspace / "ev2"), "--M", "5") == 2
    assert "exceeds" in error_record(capsys)["message"]


def test_missing_checkpoint(workspace, capsys):
    assert run(workspace, "evaluate", "--out", str(workspace / "ev3"), "--method", "x=/nope/ckpt.pt") == 2
    assert error_record(capsys)["error"] == "FileNotFoundError"


def test_missing_manifest(tmp_path, capsys):
    assert main(["pretrain", "--data", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "o")]) == 2
    assert error_record(capsys)["command"] == "pretrain"


def test_sweep_lambda_grid(workspace):
    out = workspace / "sweep_lambda"
    assert run(workspace, "sweep", "--out", str(out), "--param", "lambda", "--values", "0,1,5,40,80") == 0
    records = json.loads((out / "results.json").read_text())
    assert [r["method"] for r in records] == ["lambda=0", "lambda=1", "lambda=5", "lambda=40", "lambda=80"]
    assert yaml.safe_load((out / "lambda=40" / "config.yaml").read_text())["loss"]["lambda"] == 40.0


def test_sweep_omega_grid(workspace):
    out = workspace / "sweep_omega"
    assert run(workspace, "sweep", "--out", str(out), "--param", "omega", "--values", "2,4") == 0
    assert len(json.loads((out / "results.json").read_text())) == 2


def test_sweep_rejects_invalid_value_before_training(workspace, capsys):
    out = workspace / "sweep_bad"
    assert run(workspace, "sweep", "--out", str(out), "--param", "omega", "--values", "2,3") == 2
    assert "omega=3" in error_record(capsys)["message"]
    assert not (out / "omega=2").exists()
