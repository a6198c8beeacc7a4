import csv
import io
import json

import pytest

from asym_lab.harness.cli import cli
from asym_lab.harness.config import TrainConfig
from asym_lab.harness.data import DatasetSpec


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = TrainConfig(epochs=1, max_steps=2, batch_size=16, bn_groups=2, hidden=16, proj_hidden=16, out_dim=8,
                      bank_size=64, small_bank_size=32,
                      data=DatasetSpec(n_classes=3, train_per_class=12, eval_per_class=8))
    (d / "tiny.ini").write_text(cfg.to_text())
    assert cli(["train", "--config", str(d / "tiny.ini"), "--out", str(d / "run")]) == 0
    return d


def run(capsys, *argv):
    code = cli([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_train_writes_outputs(workdir):
    run_dir = workdir / "run"
    assert (run_dir / "checkpoint.bin").exists() and (run_dir / "config.ini").exists()
    assert len((run_dir / "metrics.jsonl").read_text().splitlines()) == 2


def test_train_seed_override_changes_run(workdir, capsys):
    code, out, _ = run(capsys, "train", "--config", workdir / "tiny.ini", "--seed", 4, "--out", workdir / "s4")
    assert code == 0 and json.loads(out)["steps"] == 2
    assert (workdir / "s4" / "metrics.jsonl").read_bytes() != (workdir / "run" / "metrics.jsonl").read_bytes()


def test_probe_prints_result(workdir, capsys):
    code, out, _ = run(capsys, "probe", "--checkpoint", workdir / "run" / "checkpoint.bin", "--epochs", 2)
    res = json.loads(out)
    assert code == 0 and 0 <= res["top1"] <= 1 and len(res["per_class"]) == 3


def test_variance_ref_writes_json_and_cdf(workdir, capsys):
    prefix = workdir / "weak"
    code, out, _ = run(capsys, "variance-ref", "--recipe", "weaker", "--checkpoint", workdir / "run" / "checkpoint.bin",
                       "--images", 6, "--r", 4, "--out", prefix)
    assert code == 0
    summary = json.loads((workdir / "weak.json").read_text())
    assert summary["v"] > 0 and len(summary["ci95"]) == 2 and json.loads(out) == summary
    rows = list(csv.reader(io.StringIO((workdir / "weak.csv").read_text())))
    assert len(rows) > 1


def test_cross_var_fresh_and_from_metrics(workdir, capsys):
    ckpt = workdir / "run" / "checkpoint.bin"
    code, out, _ = run(capsys, "cross-var", "--checkpoint", ckpt, "--images", 8)
    assert code == 0 and json.loads(out)["inv_d"] == 1 / 8
    code, out, _ = run(capsys, "cross-var", "--checkpoint", ckpt, "--metrics", workdir / "run" / "metrics.jsonl")
    assert code == 0 and json.loads(out)["steps"] == 2


def test_theory_check_csv(tmp_path, capsys):
    code, out, _ = run(capsys, "theory-check", "--trials", 100000, "--sigma-target-scale", "1,2,4",
                       "--out", tmp_path / "t.csv")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 3 and "pass" in rows[0]
    assert (tmp_path / "t.csv").read_text() == out


def test_case_study_and_report(workdir, capsys):
    out_dir = workdir / "study"
    code, out, _ = run(capsys, "case-study", "--config", workdir / "tiny.ini", "--design", "scalemix",
                       "--sides", "source,target", "--seeds", 3, "--probe-epochs", 1, "--out", out_dir)
    assert code == 0 and "| source |" in out
    assert len(json.loads((out_dir / "scalemix.json").read_text())["runs"]) == 6
    code, md, _ = run(capsys, "report", out_dir, workdir / "weak.json", "--out", workdir / "summary.md")
    assert code == 0 and "## Placement matrices" in md and "## Variance references" in md
    assert (workdir / "summary.md").read_text() == md


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"], ["frobnicate"], ["theory-check", "--formula", "other"], [],
])
def test_usage_errors_exit_1(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1 and "usage:" in err


def test_validation_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepochz = 1\n")
    code, _, err = run(capsys, "train", "--config", bad, "--out", tmp_path / "x")
    assert code == 1 and "epochz" in err
    code, _, err = run(capsys, "theory-check", "--sigma-target-scale", "one")
    assert code == 1
    code, _, err = run(capsys, "probe", "--checkpoint", tmp_path / "missing.bin")
    assert code == 1


def test_runtime_failure_exit_2(tmp_path, capsys):
    bad = tmp_path / "corrupt.bin"
    bad.write_bytes(b"ASYMCKPT" + b"\x00" * 7)
    code, _, err = run(capsys, "probe", "--checkpoint", bad)
    assert code == 2 and "runtime failure" in err


def test_help_exits_0(capsys):
    assert run(capsys, "--help")[0] == 0
