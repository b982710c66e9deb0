import csv
import json

import pytest

from sparsecast.cli import read_config_file, run


@pytest.fixture(scope="module")
def series(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "s.csv"
    assert run(["synth", "--kind", "sine_mix", "--T", "600", "--n", "2", "--seed", "7", "--out", str(p)]) == 0
    return p


def _train(series, run_dir, *extra):
    return run(["train", "--model", "mlinear", "--data", str(series), "--L", "48", "--S", "24",
                "--max-epochs", "2", "--run-dir", str(run_dir), *extra])


def test_synth_line_count(tmp_path):
    out = tmp_path / "s.csv"
    assert run(["synth", "--kind", "sine_mix", "--T", "2000", "--n", "3", "--seed", "7", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 2001 and lines[0] == "date,ch0,ch1,ch2"


def test_usage_errors_exit_1(capsys, series, tmp_path):
    assert run([]) == 1
    assert run(["train", "--data", str(series), "--bogus", "1"]) == 1
    assert run(["train", "--data", str(series), "--L", "abc", "--run-dir", str(tmp_path / "r")]) == 1
    assert "expected int" in capsys.readouterr().err


def test_unknown_config_key_named(tmp_path, series, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nlr0 = 0.01\nlearning_rate = 3\n")
    assert run(["train", "--data", str(series), "--config", str(cfg), "--run-dir", str(tmp_path / "r")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("lr0=0.5  # inline comment\n\ndeep_supervision = false\nmodel=informer_lite\n")
    assert read_config_file(cfg) == {"lr0": 0.5, "deep_supervision": False, "model": "informer_lite"}


def test_precedence_flag_over_file_over_default(tmp_path, series):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("lr0 = 0.002\nbatch_size = 16\n")
    assert _train(series, tmp_path / "run", "--config", str(cfg), "--batch-size", "8") == 0
    conf = json.loads((tmp_path / "run" / "report.json").read_text())["config"]
    assert conf["train.lr0"] == 0.002  # file over default
    assert conf["train.batch_size"] == 8  # flag over file
    assert conf["train.patience"] == 3  # default


def test_train_eval_report_and_bench(tmp_path, series):
    run_dir = tmp_path / "run"
    assert _train(series, run_dir) == 0
    for name in ("report.json", "summary.txt", "epochs.csv", "ckpt/manifest.json", "ckpt/weights.npz"):
        assert (run_dir / name).is_file()
    assert not (run_dir / ".lock").exists()
    rep = json.loads((run_dir / "report.json").read_text())
    rows = list(csv.DictReader((run_dir / "epochs.csv").open()))
    assert len(rows) == len(rep["epochs"])
    summary = (run_dir / "summary.txt").read_text()
    assert "best epoch:" in summary and "model.L = 48" in summary and "mse" in summary

    assert run(["eval", "--checkpoint", str(run_dir / "ckpt")]) == 0
    result = json.loads((run_dir / "eval.json").read_text())
    assert result["mse"] >= 0 and result["n_windows"] > 0

    # bench needs an InformerLite checkpoint: runtime failure
    assert run(["bench", "--checkpoint", str(run_dir / "ckpt")]) == 2


def test_report_idempotent(tmp_path, series):
    run_dir = tmp_path / "run"
    assert _train(series, run_dir) == 0
    before = [(run_dir / f).read_bytes() for f in ("summary.txt", "epochs.csv")]
    assert run(["report", "--run-dir", str(run_dir)]) == 0
    assert run(["report", "--run-dir", str(run_dir)]) == 0
    assert [(run_dir / f).read_bytes() for f in ("summary.txt", "epochs.csv")] == before


def test_byte_reproducible_except_timings(tmp_path, series):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _train(series, a, "--seed", "3") == 0
    assert _train(series, b, "--seed", "3") == 0
    ra, rb = (json.loads((d / "report.json").read_text()) for d in (a, b))
    ra.pop("timings"), rb.pop("timings")
    assert ra == rb
    for f in ("summary.txt", "epochs.csv", "ckpt/weights.npz", "ckpt/manifest.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_run_root_env_and_naming(tmp_path, series, monkeypatch):
    monkeypatch.setenv("SPARSECAST_RUN_ROOT", str(tmp_path / "root"))
    assert run(["train", "--data", str(series), "--L", "48", "--S", "24", "--max-epochs", "1",
                "--seed", "4"]) == 0
    (made,) = list((tmp_path / "root").iterdir())
    assert made.name.endswith("-seed4") and (made / "report.json").is_file()


def test_locked_run_dir_refused(tmp_path, series, capsys):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (run_dir / ".lock").write_text("123")
    assert _train(series, run_dir) == 2
    assert "locked" in capsys.readouterr().err


def test_informer_train_and_bench(tmp_path, series):
    run_dir = tmp_path / "inf"
    assert run(["train", "--model", "informer_lite", "--data", str(series), "--L", "48", "--S", "24",
                "--d-model", "8", "--max-epochs", "2", "--lr0", "1e-3", "--run-dir", str(run_dir)]) == 0
    assert "stability" in (run_dir / "summary.txt").read_text()
    assert run(["bench", "--checkpoint", str(run_dir / "ckpt"), "--max-windows", "8"]) == 0
    res = json.loads((run_dir / "bench.json").read_text())
    assert res["reuse"]["measurement_dot_products"] == 0
    assert res["recompute"]["measurement_dot_products"] > 0
    assert res["reuse"] == res["expected"]["reuse"]


def test_missing_data_file_exit_2(tmp_path):
    assert run(["train", "--data", str(tmp_path / "nope.csv"), "--run-dir", str(tmp_path / "r")]) == 2
