import csv
import json
import subprocess
import sys

import pytest

from spikegrad.cli import main, run_id

FAST = ["--synthetic", "features", "--synthetic-samples", "160"]


def train_args(out_dir, *extra):
    return ["train", "--arch", "deep3", "--epochs", "2", "--batch-size", "32", "--timesteps", "4",
            "--out-dir", str(out_dir), *FAST, *extra]


def test_train_writes_artifacts(tmp_path, capsys):
    assert main(train_args(tmp_path / "run")) == 0
    run = tmp_path / "run"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["run_id"] == run_id(manifest["config"])
    rows = list(csv.DictReader(open(run / "metrics.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "train_acc", "val_acc", "lr"]
    assert (run / "model.ckpt").exists()
    assert "test accuracy" in capsys.readouterr().out


def test_rerun_from_manifest_is_identical(tmp_path):
    assert main(train_args(tmp_path / "a", "--gamma", "auto", "--no-batchnorm")) == 0
    assert main(["train", "--manifest", str(tmp_path / "a" / "manifest.json"), "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert (tmp_path / "a" / "tune_history.csv").exists()


def test_eval_sweep_and_missing_checkpoint(tmp_path, capsys):
    assert main(train_args(tmp_path / "run")) == 0
    out = tmp_path / "sweep.csv"
    code = main(["eval", "--checkpoint", str(tmp_path / "run" / "model.ckpt"), "--sweep-timesteps", "5:40:5",
                 "--out", str(out), *FAST])
    assert code == 0
    rows = list(csv.DictReader(open(out)))
    assert [int(r["timesteps"]) for r in rows] == [5, 10, 15, 20, 25, 30, 35, 40]
    assert all(0 <= float(r["accuracy"]) <= 1 for r in rows)
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), *FAST]) == 2


def test_diag_grad_writes_profiles(tmp_path, capsys):
    assert main(["diag-grad", "--arch", "deep6", "--gamma", "1,10,100", "--batches", "2",
                 "--out-dir", str(tmp_path), *FAST]) == 0
    names = sorted(p.name for p in tmp_path.glob("profile_gamma*.csv"))
    assert names == ["profile_gamma1.csv", "profile_gamma10.csv", "profile_gamma100.csv"]
    assert "R=" in capsys.readouterr().out


def test_tune_gamma_exit_codes(tmp_path, capsys):
    assert main(["tune-gamma", "--arch", "deep6", "--batches", "2", "--out-dir", str(tmp_path), *FAST]) == 0
    assert "converged" in capsys.readouterr().out
    assert (tmp_path / "tune_history.csv").exists()
    assert main(["tune-gamma", "--gamma-lo", "10", "--gamma-hi", "1", *FAST]) == 2
    # max_iter 1 with a tight tolerance cannot converge
    code = main(["tune-gamma", "--arch", "deep6", "--batches", "2", "--tol", "1e-6", "--max-iter", "1",
                 "--out-dir", str(tmp_path), *FAST])
    assert code == 4


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--gamma", "wide"])
    assert info.value.code == 2
    assert main(["train", "--arch", "deep3", "--out-dir", str(tmp_path)]) == 2
    assert main(train_args(tmp_path / "x", "--no-batchnorm", "--calibration-samples", "0")) == 2


def test_flat_surrogate_warns(tmp_path, caplog):
    main(train_args(tmp_path / "run", "--gamma", "0", "--epochs", "1"))
    assert any("flat surrogate" in r.message for r in caplog.records)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    assert main(train_args(tmp_path / "run", "--max-lr", "1e38", "--no-batchnorm")) == 3
    assert (tmp_path / "run" / "metrics.csv").exists()


def test_module_entry_point_with_thread_cap(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "spikegrad", "diag-grad", "--arch", "deep4", "--gamma", "3",
                           "--batches", "1", "--out-dir", str(tmp_path), *FAST],
                          capture_output=True, text=True, env={"SPIKEGRAD_THREADS": "1", "PATH": ""})
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "profile_gamma3.csv").exists()
