#!/usr/bin/env python3
"""
Test Datasets
Verifies OXTS ingestion, truth resampling, CSV interchange, synthesis and split manifests
"""
from pathlib import Path

import numpy as np
import pytest

from datasets import (
    EARTH_RADIUS,
    GRAVITY,
    Trajectory,
    align_truth,
    inject_gap,
    load_sequence,
    load_split,
    load_split_manifest,
    make_split_manifest,
    parse_oxts,
    parse_oxts_line,
    read_imu_csv,
    resample_truth,
    save_split_manifest,
    slice_time,
    synthesize,
    write_imu_csv,
    write_trajectory_csv,
)
from geom3d import so3_exp, so3_log
from imu_model import ImuSequence
from nav_errors import DataFormatError, InvalidInputError, StructuralError
from nav_models import SynthSpec


def oxts_fields(lat: float = 49.0, lon: float = 8.4, alt: float = 110.0, yaw: float = 0.0) -> list:
    fields = [0.0] * 30
    fields[0], fields[1], fields[2] = lat, lon, alt
    fields[5] = yaw
    fields[6], fields[7] = 2.0, 1.0          # vn, ve
    fields[11], fields[12], fields[13] = 0.1, 0.2, 9.81
    fields[17], fields[18], fields[19] = 0.01, 0.02, 0.03
    return fields


def write_oxts(root: Path, rows: list, stamps: list) -> Path:
    oxts = root / "oxts"
    (oxts / "data").mkdir(parents=True)
    (oxts / "timestamps.txt").write_text("\n".join(stamps) + "\n")
    for i, row in enumerate(rows):
        (oxts / "data" / f"{i:010d}.txt").write_text(" ".join(repr(float(v)) for v in row) + "\n")
    return oxts


STAMPS = ["2011-09-26 13:02:25.964389445", "2011-09-26 13:02:25.974389445"]


# ============================================================================
# OXTS
# ============================================================================

def test_parse_oxts_small_north_offset(tmp_path):
    """Test a 1e-5 degree northward step lands ~1.11 m up the ENU y axis"""
    oxts = write_oxts(tmp_path, [oxts_fields(), oxts_fields(lat=49.0 + 1e-5)], STAMPS)
    imu, truth = parse_oxts(oxts)

    np.testing.assert_allclose(truth.times, [0.0, 0.01], atol=1e-9)
    np.testing.assert_array_equal(truth.positions[0], [0.0, 0.0, 0.0])
    assert truth.positions[1, 1] == pytest.approx(EARTH_RADIUS * np.radians(1e-5), rel=1e-6)
    assert truth.positions[1, 1] == pytest.approx(1.11, abs=0.01)
    assert abs(truth.positions[1, 0]) < 1e-9

    np.testing.assert_allclose(imu.gyro[0], [0.01, 0.02, 0.03])
    np.testing.assert_allclose(imu.accel[0], [0.1, 0.2, 9.81])
    np.testing.assert_allclose(truth.velocities[0], [1.0, 2.0, 0.0])


def test_parse_oxts_rotation_from_yaw(tmp_path):
    oxts = write_oxts(tmp_path, [oxts_fields(yaw=0.5), oxts_fields(yaw=0.6)], STAMPS)
    _, truth = parse_oxts(oxts)
    np.testing.assert_allclose(truth.rotations[0], so3_exp([0.0, 0.0, 0.5]), atol=1e-14)


def test_parse_oxts_short_line_names_file_and_line(tmp_path):
    rows = [oxts_fields(), oxts_fields()[:29]]
    oxts = write_oxts(tmp_path, rows, STAMPS)
    with pytest.raises(DataFormatError) as err:
        parse_oxts(oxts)
    assert "0000000001.txt:1:" in str(err.value)
    assert err.value.line == 1


def test_parse_oxts_line_rejects_text():
    fields = [str(v) for v in oxts_fields()]
    fields[4] = "pitch"
    with pytest.raises(DataFormatError):
        parse_oxts_line(" ".join(fields), "frame.txt", 3)


def test_parse_oxts_count_mismatch(tmp_path):
    oxts = write_oxts(tmp_path, [oxts_fields()], STAMPS)
    with pytest.raises(StructuralError):
        parse_oxts(oxts)


# ============================================================================
# RESAMPLING
# ============================================================================

def two_pose_truth() -> Trajectory:
    return Trajectory(
        times=[0.0, 1.0],
        rotations=np.stack([np.eye(3), so3_exp([0.0, 0.0, np.pi / 2])]),
        positions=[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
        velocities=[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
    )


def test_resample_at_source_times_is_identity():
    truth = two_pose_truth()
    same = resample_truth(truth, truth.times)
    np.testing.assert_array_equal(same.positions, truth.positions)
    np.testing.assert_array_equal(same.rotations, truth.rotations)


def test_resample_midpoint():
    mid = resample_truth(two_pose_truth(), [0.5])
    np.testing.assert_allclose(mid.positions[0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(mid.velocities[0], [2.0, 0.0, 0.0])
    np.testing.assert_allclose(mid.rotations[0], so3_exp([0.0, 0.0, np.pi / 4]), atol=1e-9)


def test_resample_out_of_range():
    with pytest.raises(InvalidInputError):
        resample_truth(two_pose_truth(), [1.5])


def test_align_truth_picks_exact_rows():
    _, truth = synthesize(SynthSpec(kind="circle", duration=1.0))
    aligned = align_truth(truth, truth.times[:-1])
    assert len(aligned) == len(truth) - 1
    np.testing.assert_array_equal(aligned.positions, truth.positions[:-1])


def test_trajectory_rejects_duplicate_times():
    with pytest.raises(InvalidInputError):
        Trajectory(times=[0.0, 0.0], rotations=np.stack([np.eye(3)] * 2),
                   positions=np.zeros((2, 3)), velocities=np.zeros((2, 3)))


# ============================================================================
# SYNTHESIS
# ============================================================================

def test_synth_straight_line():
    imu, truth = synthesize(SynthSpec(kind="straight", speed=1.0, duration=10.0, rate=100.0))
    assert len(imu) == 1000
    assert len(truth) == 1001
    np.testing.assert_allclose(truth.positions[-1], [10.0, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(imu.accel, np.tile(GRAVITY, (1000, 1)), atol=1e-12)
    np.testing.assert_allclose(imu.gyro, 0.0, atol=1e-15)


def test_synth_circle_sample_count():
    imu, _ = synthesize(SynthSpec(kind="circle", duration=60.0, rate=100.0))
    assert len(imu) == 6000


def test_synth_figure_eight_flips_yaw_rate():
    imu, _ = synthesize(SynthSpec(kind="figure-eight", duration=20.0, yaw_rate=0.2))
    half = imu.t < 10.0
    assert np.all(imu.gyro[half, 2] > 0)
    assert np.all(imu.gyro[~half & (imu.t > 10.0), 2] < 0)


def test_synth_is_euler_consistent():
    """Test explicit Euler over the clean stream lands on every truth state"""
    for kind in ("circle", "figure-eight", "straight"):
        imu, truth = synthesize(SynthSpec(kind=kind, duration=20.0, speed=3.0, yaw_rate=0.15))
        dt = 1.0 / 100.0
        R, v, p = truth.rotations[0].copy(), truth.velocities[0].copy(), truth.positions[0].copy()
        worst_p, worst_R = 0.0, 0.0
        for k in range(len(imu)):
            R, v, p = R @ so3_exp(imu.gyro[k] * dt), v + (R @ imu.accel[k] - GRAVITY) * dt, p + v * dt
            worst_p = max(worst_p, float(np.max(np.abs(p - truth.positions[k + 1]))))
            worst_R = max(worst_R, float(np.linalg.norm(so3_log(R.T @ truth.rotations[k + 1]))))
        assert worst_p <= 1e-9
        assert worst_R <= 1e-9


def test_synth_piecewise_and_slip():
    spec = SynthSpec(
        kind="piecewise", duration=4.0,
        segments=[{"duration": 2.0, "speed": 1.0, "yaw_rate": 0.0}, {"duration": 2.0, "speed": 2.0, "yaw_rate": 0.3}],
        lateral_slip_std=0.05, seed=3,
    )
    _, truth_a = synthesize(spec)
    _, truth_b = synthesize(spec)
    np.testing.assert_array_equal(truth_a.positions, truth_b.positions)
    body_v = np.einsum("kji,kj->ki", truth_a.rotations, truth_a.velocities)
    assert np.max(np.abs(body_v[:, 1])) > 0.0


def test_inject_gap_drops_interval():
    imu, _ = synthesize(SynthSpec(kind="circle", duration=10.0))
    gapped = inject_gap(imu, 3.0, 2.0)
    dropped = int(np.count_nonzero((imu.t >= 3.0) & (imu.t < 5.0)))
    assert abs(dropped - 200) <= 1
    assert len(gapped) == len(imu) - dropped
    assert not np.any((gapped.t >= 3.0) & (gapped.t < 5.0))


# ============================================================================
# CSV AND SPLITS
# ============================================================================

def test_imu_csv_round_trip(tmp_path):
    imu, _ = synthesize(SynthSpec(kind="circle", duration=2.0))
    back = read_imu_csv(write_imu_csv(imu, tmp_path / "imu.csv"))
    np.testing.assert_array_equal(back.stacked(), imu.stacked())
    np.testing.assert_array_equal(back.t, imu.t)


def test_imu_csv_round_trip_is_bit_exact_for_arbitrary_doubles(tmp_path):
    rng = np.random.default_rng(11)
    n = 2000
    imu = ImuSequence(
        t=np.cumsum(rng.uniform(1e-3, 2e-2, n)),
        gyro=rng.normal(0.0, 1.0, (n, 3)) * 10.0 ** rng.integers(-12, 3, (n, 1)),
        accel=rng.normal(0.0, 9.8, (n, 3)),
    )
    back = read_imu_csv(write_imu_csv(imu, tmp_path / "imu.csv"))
    np.testing.assert_array_equal(back.t, imu.t)
    np.testing.assert_array_equal(back.gyro, imu.gyro)
    np.testing.assert_array_equal(back.accel, imu.accel)


def test_imu_csv_bad_value_reports_line(tmp_path):
    path = tmp_path / "imu.csv"
    path.write_text("t,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.8\n0.01,0,zero,0,0,0,9.8\n")
    with pytest.raises(DataFormatError) as err:
        read_imu_csv(path)
    assert err.value.line == 3


def test_imu_csv_wrong_header(tmp_path):
    path = tmp_path / "imu.csv"
    path.write_text("time,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.8\n")
    with pytest.raises(DataFormatError):
        read_imu_csv(path)


def write_synth_sequence(root: Path, name: str, duration: float = 10.0) -> Path:
    imu, truth = synthesize(SynthSpec(kind="circle", duration=duration))
    seq_dir = root / name
    write_imu_csv(imu, seq_dir / "imu.csv")
    write_trajectory_csv(truth, seq_dir / "truth.csv")
    return seq_dir


def test_load_sequence_from_csv_pair(tmp_path):
    seq_dir = write_synth_sequence(tmp_path, "06", duration=2.0)
    imu, truth = load_sequence(seq_dir)
    assert len(imu) == 200 and len(truth) == 201
    with pytest.raises(StructuralError):
        load_sequence(tmp_path / "missing")


def test_slice_time_keeps_closing_truth_row():
    imu, truth = synthesize(SynthSpec(kind="circle", duration=10.0))
    imu_part, truth_part = slice_time(imu, truth, 2.0, 4.0)
    assert len(imu_part) == 200
    assert len(truth_part) == 201
    assert truth_part.times[-1] == pytest.approx(4.0)


def test_split_manifest_protocol(tmp_path):
    manifest = make_split_manifest(["01", "06", "07"], train_seconds=40.0)
    assert [e.seq for e in manifest.train] == ["06", "07"]
    assert all(e.t_end == 40.0 for e in manifest.train)
    assert all(e.t_start == 40.0 and e.t_end is None for e in manifest.val)
    assert [e.seq for e in manifest.test] == ["01"]

    path = save_split_manifest(manifest, tmp_path / "split.json")
    assert load_split_manifest(path) == manifest


def test_load_split_lists_every_missing_sequence(tmp_path):
    write_synth_sequence(tmp_path, "06", duration=3.0)
    manifest = make_split_manifest(["06", "07", "08"], train_seqs=["06", "07", "08"], test_seqs=[], train_seconds=1.0)
    with pytest.raises(StructuralError) as err:
        load_split(tmp_path, manifest.train)
    assert "07" in str(err.value) and "08" in str(err.value)

    loaded = load_split(tmp_path, manifest.train[:1])
    name, imu, truth = loaded[0]
    assert name == "06" and len(imu) == 100 and len(truth) == 101


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
