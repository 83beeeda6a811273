#!/usr/bin/env python3
"""
Test SpikeNav CLI
Verifies every subcommand end to end on small synthetic sequences, plus exit codes and config loading
"""
import json
import os
from pathlib import Path

import numpy as np
import pytest

from cli import main
from datasets import read_imu_csv, read_trajectory_csv
from nav_errors import ConfigError
from nav_models import CorruptionSidecar, RunConfig, RunMeta


@pytest.fixture(autouse=True)
def isolated_cwd(tmp_path, monkeypatch):
    """Run from an empty directory so no stray .env or SPIKENAV_* setting leaks in"""
    monkeypatch.chdir(tmp_path)
    for key in list(os.environ):
        if key.startswith("SPIKENAV_"):
            monkeypatch.delenv(key)


def cli(*args) -> int:
    return main([str(a) for a in args])


def synth(out: Path, kind: str = "circle", duration: float = 10.0, speed: float = 1.0, yaw_rate: float = 0.1) -> Path:
    assert cli("synth", "--kind", kind, "--duration", duration, "--speed", speed, "--yaw-rate", yaw_rate, "--out", out) == 0
    return out


# ============================================================================
# SYNTH AND CORRUPT
# ============================================================================

def test_synth_writes_pair_and_is_reproducible(tmp_path, capsys):
    a = synth(tmp_path / "a", kind="straight", duration=10.0, speed=1.0)
    assert "1000 IMU samples" in capsys.readouterr().out
    imu, truth = read_imu_csv(a / "imu.csv"), read_trajectory_csv(a / "truth.csv")
    assert len(imu) == 1000 and len(truth) == 1001
    assert truth.positions[-1, 0] == pytest.approx(10.0, abs=1e-9)

    b = synth(tmp_path / "b", kind="straight", duration=10.0, speed=1.0)
    assert (a / "imu.csv").read_bytes() == (b / "imu.csv").read_bytes()
    assert (a / "truth.csv").read_bytes() == (b / "truth.csv").read_bytes()


def test_synth_piecewise_legs(tmp_path):
    out = tmp_path / "legs"
    assert cli("synth", "--kind", "piecewise", "--segment", 1.0, 2.0, 0.0, "--segment", 1.5, 1.0, 0.5, "--out", out) == 0
    imu, truth = read_imu_csv(out / "imu.csv"), read_trajectory_csv(out / "truth.csv")
    assert len(imu) == 250
    np.testing.assert_allclose(truth.positions[100], [2.0, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(imu.gyro[:100, 2], 0.0, atol=1e-12)
    np.testing.assert_allclose(imu.gyro[100:, 2], 0.5, rtol=1e-9)

    assert cli("synth", "--kind", "piecewise", "--out", tmp_path / "none") == 2


def test_corrupt_with_zero_spec_is_identity(tmp_path):
    src = synth(tmp_path / "clean", duration=2.0) / "imu.csv"
    assert cli("corrupt", src, "--out", tmp_path / "same.csv") == 0
    clean, same = read_imu_csv(src), read_imu_csv(tmp_path / "same.csv")
    np.testing.assert_array_equal(same.stacked(), clean.stacked())


def test_corrupt_preset_writes_sidecar(tmp_path):
    src = synth(tmp_path / "clean", duration=2.0) / "imu.csv"
    out = tmp_path / "noisy" / "imu.csv"
    assert cli("corrupt", src, "--preset", "kitti-lowcost", "--seed", 9, "--out", out) == 0
    sidecar = CorruptionSidecar.model_validate_json(out.with_suffix(".corruption.json").read_text())
    assert sidecar.seed == 9 and sidecar.preset == "kitti-lowcost"
    assert all(0.015 <= b <= 0.025 for b in sidecar.gyro_bias)
    assert all(0.45 <= b <= 0.55 for b in sidecar.accel_bias)
    assert sidecar.n_samples == 200

    again = tmp_path / "again.csv"
    cli("corrupt", src, "--preset", "kitti-lowcost", "--seed", 9, "--out", again)
    assert again.read_bytes() == out.read_bytes()


def test_corrupt_gap(tmp_path):
    src = synth(tmp_path / "clean", duration=5.0) / "imu.csv"
    out = tmp_path / "gapped.csv"
    assert cli("corrupt", src, "--gap-start", 2.0, "--gap-duration", 1.0, "--out", out) == 0
    gapped = read_imu_csv(out)
    assert abs(len(gapped) - 400) <= 1
    assert not np.any((gapped.t >= 2.0) & (gapped.t < 3.0))
    assert cli("corrupt", src, "--gap-start", 2.0, "--out", tmp_path / "bad.csv") == 2


# ============================================================================
# RUN AND EVAL
# ============================================================================

def test_static_run_on_clean_circle_scores_near_zero(tmp_path, capsys):
    seq = synth(tmp_path / "circle", duration=60.0, speed=10.0, yaw_rate=0.1)
    est = tmp_path / "out" / "circle.csv"
    assert cli("run", seq, "--mode", "static", "--out", est) == 0

    meta = RunMeta.model_validate_json(est.with_suffix(".meta.json").read_text())
    assert meta.mode == "static" and meta.n_samples == 6000
    assert meta.gap_events == [] and meta.checkpoint is None
    assert len(read_trajectory_csv(est)) == 6000

    report_file = tmp_path / "out" / "report.json"
    assert cli("eval", "--estimate", est, "--truth", seq / "truth.csv", "--name", "circle", "--out", report_file) == 0
    report = json.loads(report_file.read_text())["circle"]
    assert report["available"]
    assert report["rte_percent"] <= 1e-4
    assert "circle" in capsys.readouterr().out
    assert report_file.with_suffix(".txt").is_file()


def test_open_loop_run_writes_estimate(tmp_path):
    seq = synth(tmp_path / "seq", duration=3.0)
    est = tmp_path / "open.csv"
    assert cli("run", seq / "imu.csv", "--truth", seq / "truth.csv", "--mode", "open-loop", "--out", est) == 0
    assert RunMeta.model_validate_json(est.with_suffix(".meta.json").read_text()).mode == "open-loop"


def test_eval_truth_against_itself(tmp_path):
    seq = synth(tmp_path / "seq", duration=20.0, speed=10.0)
    out = tmp_path / "self.json"
    assert cli("eval", "--estimate", seq / "truth.csv", "--truth", seq, "--name", "self", "--out", out) == 0
    report = json.loads(out.read_text())["self"]
    assert report["rte_percent"] == pytest.approx(0.0, abs=1e-12)


def test_eval_short_path_reports_unavailable(tmp_path, capsys):
    seq = synth(tmp_path / "short", kind="straight", duration=5.0, speed=1.0)
    out = tmp_path / "short.json"
    assert cli("eval", "--estimate", seq / "truth.csv", "--truth", seq / "truth.csv", "--out", out) == 0
    report = json.loads(out.read_text())["truth"]
    assert report["n_pairs"] == 0 and not report["available"]
    assert "n/a" in capsys.readouterr().out


# ============================================================================
# EXIT CODES
# ============================================================================

def test_adaptive_without_checkpoint_is_a_config_error(tmp_path):
    seq = synth(tmp_path / "seq", duration=1.0)
    assert cli("run", seq, "--mode", "adaptive", "--out", tmp_path / "est.csv") == 2


def test_invalid_numeric_flags_are_input_errors(tmp_path):
    assert cli("synth", "--duration", -1, "--out", tmp_path / "neg") == 2
    assert cli("synth", "--rate", 0, "--out", tmp_path / "zero") == 2
    assert cli("synth", "--slip-std", -0.1, "--out", tmp_path / "slip") == 2

    src = synth(tmp_path / "clean", duration=1.0) / "imu.csv"
    assert cli("corrupt", src, "--seed", -1, "--out", tmp_path / "neg.csv") == 2
    assert cli("corrupt", src, "--preset", "kitti-lowcost", "--seed", -5, "--out", tmp_path / "neg2.csv") == 2
    assert not (tmp_path / "neg.csv").exists()
    assert not (tmp_path / "neg2.csv").exists()


def test_bad_checkpoint_is_rejected(tmp_path):
    seq = synth(tmp_path / "seq", duration=1.0)
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint at all")
    assert cli("run", seq, "--checkpoint", bogus, "--out", tmp_path / "est.csv") == 2


def test_malformed_and_missing_inputs(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("t,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.8\n0.01,0,0,x,0,0,9.8\n")
    assert cli("run", bad, "--out", tmp_path / "est.csv") == 3
    assert cli("run", tmp_path / "missing.csv", "--out", tmp_path / "est.csv") == 3
    assert cli("eval", "--estimate", tmp_path / "missing.csv", "--truth", bad) == 3


def test_invalid_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    assert cli("--config", cfg, "synth", "--out", tmp_path / "s") == 2
    cfg.write_text(json.dumps({"net": {"window_n": 64}}))
    assert cli("--config", cfg, "synth", "--out", tmp_path / "s") == 2


# ============================================================================
# TRAINING PIPELINE
# ============================================================================

def test_split_train_and_adaptive_run(tmp_path):
    root = tmp_path / "data"
    for name in ("06", "01"):
        synth(root / name, duration=4.0, speed=2.0, yaw_rate=0.2)
    assert len(read_imu_csv(root / "06" / "imu.csv")) == 400

    manifest = tmp_path / "split.json"
    assert cli("split", "--root", root, "--train-seqs", "06", "--test-seqs", "01",
               "--train-seconds", 2.0, "--out", manifest) == 0
    split = json.loads(manifest.read_text())
    assert [e["seq"] for e in split["train"]] == ["06"]
    assert [e["seq"] for e in split["test"]] == ["01"]

    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps({
        "paths": {"dataset_root": str(root), "output_dir": str(tmp_path / "train")},
        "net": {"window_n": 16, "d_model": 8, "n_heads": 2, "n_blocks": 1, "ts": 4},
        "train": {"window_n": 16, "epochs": 2, "batch_size": 8, "checkpoint_every": 1},
    }))
    assert cli("--config", cfg, "train", "--manifest", manifest) == 0
    out = tmp_path / "train"
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 2
    for name in ("best.ckpt", "last.ckpt", "epoch_0001.ckpt", "epoch_0002.ckpt"):
        assert (out / name).is_file()

    est = tmp_path / "adaptive.csv"
    assert cli("--config", cfg, "run", root / "01", "--checkpoint", out / "best.ckpt", "--out", est) == 0
    meta = RunMeta.model_validate_json(est.with_suffix(".meta.json").read_text())
    assert meta.mode == "adaptive"
    assert meta.checkpoint.endswith("best.ckpt")
    assert np.all(np.isfinite(read_trajectory_csv(est).positions))


def test_train_without_manifest_is_a_config_error(tmp_path):
    assert cli("train") == 2


# ============================================================================
# CONFIG AND LOGGING
# ============================================================================

def test_env_overrides_reach_nested_fields():
    cfg = RunConfig.load(environ={"SPIKENAV_FILTER__SIGMA_LAT2": "0.5", "SPIKENAV_MODE": "open-loop", "OTHER": "1"})
    assert cfg.filter.sigma_lat2 == 0.5
    assert cfg.mode == "open-loop"


def test_env_overrides_are_validated():
    with pytest.raises(ConfigError):
        RunConfig.load(environ={"SPIKENAV_FILTER__SIGMA_LAT2": "-1"})
    with pytest.raises(ConfigError):
        RunConfig.load(environ={"SPIKENAV_NET__WINDOW_N": "64"})
    cfg = RunConfig.load(environ={"SPIKENAV_NET__WINDOW_N": "64", "SPIKENAV_TRAIN__WINDOW_N": "64"})
    assert cfg.net.window_n == cfg.train.window_n == 64


def test_json_log_format(tmp_path, capsys):
    assert cli("--log-format", "json", "synth", "--duration", 1.0, "--out", tmp_path / "s") == 0
    records = [json.loads(line) for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    assert records
    assert all({"name", "levelname", "message"} <= set(r) for r in records)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
