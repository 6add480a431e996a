import json
import subprocess
import sys

import pytest

from spangcn.cli import run_cli

SMALL = {"hidden": 8, "embed_dim": 6, "pred_dim": 3, "lower_layers": 1, "top_layers": 1, "baseline_layers": 2}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run_cli(["synth", "--seed", "7", "--size", "14", "--out", str(d / "all.jsonl")]) == 0
    lines = (d / "all.jsonl").read_text().splitlines()
    (d / "train.jsonl").write_text("\n".join(lines[:10]) + "\n")
    (d / "dev.jsonl").write_text("\n".join(lines[10:]) + "\n")
    config = dict(SMALL, train="train.jsonl", dev="dev.jsonl", checkpoint_dir="run", max_epochs=2, record_timing=False)
    (d / "config.json").write_text(json.dumps(config))
    assert run_cli(["train", "--config", str(d / "config.json")]) == 0
    return d


def test_synth_writes_requested_lines(tmp_path):
    out = tmp_path / "toy.jsonl"
    assert run_cli(["synth", "--seed", "7", "--size", "50", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 50


def test_train_outputs(workdir):
    run = workdir / "run"
    assert (run / "checkpoint.bin").exists()
    assert len((run / "log.jsonl").read_text().splitlines()) == 2
    assert json.loads((run / "resolved_config.json").read_text())["hidden"] == 8


def test_train_flag_overrides(workdir, capsys):
    code = run_cli(
        ["train", "--config", str(workdir / "config.json"), "--max-epochs", "1", "--variant", "baseline",
         "--checkpoint-dir", str(workdir / "run_b")]
    )
    assert code == 0
    resolved = json.loads((workdir / "run_b" / "resolved_config.json").read_text())
    assert resolved["variant"] == "baseline" and resolved["max_epochs"] == 1
    assert "best_dev_f1" in capsys.readouterr().out


def test_eval(workdir, capsys):
    assert run_cli(["eval", "--checkpoint", str(workdir / "run" / "checkpoint.bin"), "--data", str(workdir / "dev.jsonl")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert 0.0 <= report["f1"] <= 1.0
    assert run_cli(
        ["eval", "--checkpoint", str(workdir / "run" / "checkpoint.bin"), "--data", str(workdir / "dev.jsonl"), "--text"]
    ) == 0
    assert "overall" in capsys.readouterr().out


def test_analyze(workdir):
    plots = workdir / "plots"
    code = run_cli(
        ["analyze", "--checkpoint", str(workdir / "run" / "checkpoint.bin"), "--data", str(workdir / "dev.jsonl"),
         "--buckets", "sentence_length:0,8,inf", "pred_arg_distance:0,2,inf", "--oracle", "fix_labels", "drop_arg",
         "--plot-data", str(plots), "--json", str(workdir / "report.json")]
    )
    assert code == 0
    assert {p.name for p in plots.iterdir()} == {"sentence_length.csv", "pred_arg_distance.csv", "corrections.csv"}
    report = json.loads((workdir / "report.json").read_text())
    assert [c["name"] for c in report["corrections"]] == ["fix_labels", "drop_arg"]


def test_analyze_rejects_unknown_oracle(workdir):
    code = run_cli(
        ["analyze", "--checkpoint", str(workdir / "run" / "checkpoint.bin"), "--data", str(workdir / "dev.jsonl"),
         "--oracle", "swap"]
    )
    assert code == 1


def test_gradcheck_passes(capsys):
    assert run_cli(["gradcheck", "--variant", "spangcn", "--eps", "1e-5"]) == 0
    out = capsys.readouterr().out
    assert "max_rel_error=" in out and "PASS" in out


def test_gradcheck_failure_exit_code(monkeypatch):
    from spangcn import gradcheck
    from spangcn.autodiff import GradCheckResult

    monkeypatch.setattr(gradcheck, "run_gradcheck", lambda *a, **k: GradCheckResult(0.3, "w", (0,), 200, 1.0))
    assert run_cli(["gradcheck"]) == 2


def test_convert_tree(tmp_path):
    src = tmp_path / "trees.txt"
    src.write_text("(S (NP (DT the) (NN cat)) (VP (VBD sat)))\n-\n")
    out = tmp_path / "deps.jsonl"
    assert run_cli(["convert-tree", "--in", str(src), "--out", str(out)]) == 0
    first, second = out.read_text().splitlines()
    rec = json.loads(first)
    assert rec["heads"] == [-1, 0, 0] and rec["tokens"] == ["the", "cat", "sat"]
    assert second == "null"


def test_missing_config_exits_one(capsys):
    assert run_cli(["train", "--config", "missing.json"]) == 1
    assert "missing.json" in capsys.readouterr().err


def test_unknown_flag_exits_one(capsys):
    assert run_cli(["synth", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": "x", "checkpoint_dir": "r", "colour": 1}))
    assert run_cli(["train", "--config", str(tmp_path / "c.json")]) == 1


def test_missing_data_path(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": "nope.jsonl", "checkpoint_dir": "r"}))
    assert run_cli(["train", "--config", str(tmp_path / "c.json")]) == 1


def test_bad_corpus_line(tmp_path, workdir):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"tokens": ["a"], "predicates": [{"index": 3, "spans": []}], "tree": null}\n')
    config = dict(SMALL, train=str(bad), checkpoint_dir=str(tmp_path / "r"), max_epochs=1)
    (tmp_path / "c.json").write_text(json.dumps(config))
    assert run_cli(["train", "--config", str(tmp_path / "c.json")]) == 1


def test_console_entry_point(tmp_path):
    out = tmp_path / "t.jsonl"
    proc = subprocess.run(
        [sys.executable, "-m", "spangcn.cli", "synth", "--seed", "1", "--size", "3", "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert len(out.read_text().splitlines()) == 3
