import json
import re

import numpy as np
import pytest
import yaml

from netonnet import synthetic
from netonnet.cli import load_run_config, main, subsystem_seeds
from netonnet.model import NONModel, save_checkpoint


def write_project(tmp_path, n_rows=400, extra=None, model=None):
    data = synthetic.separable(n_rows, n_cat=3, n_num=2, cardinality=6, seed=0)
    synthetic.write_csv(data, tmp_path / "train.csv")
    (tmp_path / "schema.yaml").write_text(yaml.safe_dump(data.schema.to_dict()))
    cfg = {
        "data": {"train": "train.csv", "schema": "schema.yaml", "threshold": 2, "seed": 5},
        "model": model or {"embedding_dim": 4, "dnn_widths": [8], "fusion_widths": [4], "attention_heads": 1,
                           "attention_dim": 2, "operations": "lr,dnn,bi"},
        "training": {"epochs": 3, "patience": 3, "batch_size": 64, "learning_rate": 0.05},
        "search": {"n_trials": 2, "space": {"embedding_dims": [4], "dnn_widths": [8], "dnn_depth": [1, 1],
                                             "field_wise_depth": [1, 2]}},
    }
    for k, v in (extra or {}).items():
        cfg[k] = {**cfg.get(k, {}), **v}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def project(tmp_path):
    return write_project(tmp_path), tmp_path / "out"


def test_full_pipeline(project, capsys):
    cfg, out = project
    code, stdout, _ = run(capsys, "prepare", "--config", cfg, "--out", out)
    assert code == 0 and "prepared" in stdout
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["rows"]["train"] + manifest["rows"]["valid"] + manifest["rows"]["test"] == 400
    assert manifest["rows"]["test"] == 80 and manifest["rows"]["valid"] == 64
    assert manifest["config_hash"] == load_run_config(cfg).hash

    code, stdout, _ = run(capsys, "train", "--config", cfg, "--out", out)
    assert code == 0 and (out / "model.npz").exists()
    log = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 3 and all(r["config_hash"] == manifest["config_hash"] for r in log)

    code, stdout, _ = run(capsys, "evaluate", "--config", cfg, "--out", out, "--split", "test")
    assert code == 0
    assert re.fullmatch(r"test AUC: \d\.\d{4}\n", stdout)

    code, stdout, _ = run(capsys, "evaluate", "--config", cfg, "--out", out, "--json-lines")
    rec = json.loads(stdout)
    assert rec["split"] == "test" and 0.0 <= rec["auc"] <= 1.0

    code, stdout, _ = run(capsys, "analyze", "--config", cfg, "--out", out, "--sample-size", "5")
    assert code == 0 and "micro average" in stdout
    sim = json.loads((out / "similarity.json").read_text())
    assert set(sim["before"]) == {"cat0", "cat1", "cat2"}
    assert (out / "embeddings.tsv").exists()


def test_train_is_reproducible(project, capsys, tmp_path):
    cfg, out = project
    logs = []
    for _ in range(2):
        run(capsys, "prepare", "--config", cfg, "--out", out, "--seed", "9")
        run(capsys, "train", "--config", cfg, "--out", out, "--seed", "9")
        logs.append([{k: v for k, v in json.loads(x).items() if k != "elapsed"}
                     for x in (out / "train_log.jsonl").read_text().splitlines()])
    assert logs[0] == logs[1]


def test_search_and_report(project, capsys):
    cfg, out = project
    run(capsys, "prepare", "--config", cfg, "--out", out)
    code, stdout, _ = run(capsys, "search", "--config", cfg, "--out", out, "--fix-operations", "lr,dnn")
    assert code == 0 and (out / "best_model.npz").exists()
    lines = [json.loads(x) for x in (out / "trials.jsonl").read_text().splitlines()]
    trials = [x for x in lines if not x.get("summary")]
    assert len(trials) == 2
    assert all(t["config"]["operations"] == ["lr", "dnn"] for t in trials)
    assert lines[-1]["summary"] is True
    assert all(x["config_hash"] == load_run_config(cfg).hash for x in lines)
    code, stdout, _ = run(capsys, "report", "--config", cfg, "--out", out)
    assert code == 0 and "best trial" in stdout
    code, stdout, _ = run(capsys, "report", "--config", cfg, "--out", out, "--json-lines")
    assert json.loads(stdout.splitlines()[-1])["summary"] is True


def test_missing_prerequisite_names_command(project, capsys):
    cfg, out = project
    code, _, err = run(capsys, "train", "--config", cfg, "--out", out)
    assert code == 1 and "netonnet prepare" in err
    run(capsys, "prepare", "--config", cfg, "--out", out)
    code, _, err = run(capsys, "evaluate", "--config", cfg, "--out", out)
    assert code == 1 and "netonnet train" in err
    code, _, err = run(capsys, "report", "--config", cfg, "--out", out)
    assert code == 1 and "netonnet search" in err


def test_analyze_refuses_untrained(project, capsys):
    cfg, out = project
    run(capsys, "prepare", "--config", cfg, "--out", out)
    rc = load_run_config(cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    model = NONModel(rc.model, rc.schema(), manifest["vocab_sizes"], seed=0)
    save_checkpoint(out / "model.npz", model, trained=False)
    code, _, err = run(capsys, "analyze", "--config", cfg, "--out", out)
    assert code == 1 and "--allow-untrained" in err
    code, _, _ = run(capsys, "analyze", "--config", cfg, "--out", out, "--allow-untrained")
    assert code == 0


@pytest.mark.parametrize("extra", [{"model": {"embeding_dim": 4}}, {"data": {"path": "x"}},
                                   {"training": {"epochs": 0}}, {"bogus": {"a": 1}}])
def test_bad_config_exits_1(tmp_path, capsys, extra):
    cfg = write_project(tmp_path, extra=extra)
    code, _, err = run(capsys, "prepare", "--config", cfg, "--out", tmp_path / "o")
    assert code == 1 and "error" in err


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    cfg = write_project(tmp_path)
    run(capsys, "prepare", "--config", cfg, "--out", tmp_path / "o")
    code, _, err = run(capsys, "search", "--config", cfg, "--out", tmp_path / "o", "--fix-operations", "lr,xyz")
    assert code == 1


def test_runtime_failure_exits_2(project, capsys):
    cfg, out = project
    run(capsys, "prepare", "--config", cfg, "--out", out)
    (out / "model.npz").write_bytes(b"not a checkpoint")
    code, _, err = run(capsys, "evaluate", "--config", cfg, "--out", out)
    assert code == 2 and "failed" in err


def test_paths_resolve_relative_to_config(project, capsys, monkeypatch, tmp_path):
    cfg, out = project
    elsewhere = tmp_path / "elsewhere"
    elsewhere.mkdir()
    monkeypatch.chdir(elsewhere)
    code, _, _ = run(capsys, "prepare", "--config", cfg, "--out", out)
    assert code == 0


def test_schema_change_requires_reprepare(project, capsys, tmp_path):
    cfg, out = project
    run(capsys, "prepare", "--config", cfg, "--out", out)
    schema = yaml.safe_load((tmp_path / "schema.yaml").read_text())
    schema["fields"] = schema["fields"][:-1]
    (tmp_path / "schema.yaml").write_text(yaml.safe_dump(schema))
    code, _, err = run(capsys, "train", "--config", cfg, "--out", out)
    assert code == 1 and "prepare" in err


def test_subsystem_seeds_independent():
    a, b = subsystem_seeds(0), subsystem_seeds(1)
    assert len(set(a.values())) == 4 and a != b and subsystem_seeds(0) == a
