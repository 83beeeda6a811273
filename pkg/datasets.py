"""
Datasets - KITTI OXTS ingestion, CSV interchange and Euler-consistent synthesis
Every sequence the toolkit touches enters or leaves through here
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from geom3d import from_quat_wxyz, from_rpy, so3_exp, so3_log, to_quat_wxyz
from imu_model import ImuSequence, box_muller, make_rng
from nav_errors import DataFormatError, InvalidInputError, StructuralError
from nav_models import SplitEntry, SplitManifest, SynthSpec

logger = logging.getLogger(__name__)

EARTH_RADIUS = 6378137.0   # spherical Earth, equatorial radius (m)
GRAVITY = np.array([0.0, 0.0, 9.80665])

IMU_COLUMNS = ["t", "wx", "wy", "wz", "ax", "ay", "az"]
TRAJECTORY_COLUMNS = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz"]

OXTS_FIELDS = 30
# Field positions in a KITTI raw OXTS line
OXTS_LAT, OXTS_LON, OXTS_ALT = 0, 1, 2
OXTS_ROLL, OXTS_PITCH, OXTS_YAW = 3, 4, 5
OXTS_VN, OXTS_VE, OXTS_VU = 6, 7, 10
OXTS_AX, OXTS_AY, OXTS_AZ = 11, 12, 13
OXTS_WX, OXTS_WY, OXTS_WZ = 17, 18, 19

DEFAULT_TRAIN_SEQS = [f"{i:02d}" for i in range(6, 15)]
DEFAULT_TEST_SEQS = [f"{i:02d}" for i in range(1, 6)]


# ============================================================================
# TYPES
# ============================================================================

@dataclass
class OxtsRecord:
    """One OXTS frame: geodetic pose, world velocity, body IMU readings"""
    lat: float
    lon: float
    alt: float
    roll: float
    pitch: float
    yaw: float
    vn: float
    ve: float
    vu: float
    a_body: np.ndarray
    w_body: np.ndarray
    raw: np.ndarray


@dataclass
class Trajectory:
    """Time-indexed poses: rotations (n, 3, 3), positions (n, 3), velocities (n, 3)"""
    times: np.ndarray
    rotations: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1, 3, 3)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 3)
        n = len(self.times)
        if not (len(self.rotations) == len(self.positions) == len(self.velocities) == n):
            raise InvalidInputError(
                f"trajectory columns disagree: {n} times, {len(self.rotations)} rotations, "
                f"{len(self.positions)} positions, {len(self.velocities)} velocities"
            )
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise InvalidInputError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def subset(self, index) -> "Trajectory":
        return Trajectory(
            times=self.times[index],
            rotations=self.rotations[index],
            positions=self.positions[index],
            velocities=self.velocities[index],
        )


# ============================================================================
# KITTI OXTS
# ============================================================================

def parse_oxts_line(line: str, path: str = "<oxts>", lineno: int = 1) -> OxtsRecord:
    """
    Parse one OXTS data line

    Args:
        line: 30 whitespace-separated decimals
        path: Source file, for error messages
        lineno: Line number within the file, for error messages

    Returns:
        OxtsRecord
    """
    fields = line.split()
    if len(fields) != OXTS_FIELDS:
        raise DataFormatError(f"expected {OXTS_FIELDS} fields, found {len(fields)}", path, lineno)
    try:
        values = np.array([float(f) for f in fields])
    except ValueError as e:
        raise DataFormatError(f"unparsable number ({e})", path, lineno) from e
    if not np.all(np.isfinite(values[OXTS_ROLL:OXTS_YAW + 1])):
        raise DataFormatError("non-finite attitude", path, lineno)
    return OxtsRecord(
        lat=values[OXTS_LAT], lon=values[OXTS_LON], alt=values[OXTS_ALT],
        roll=values[OXTS_ROLL], pitch=values[OXTS_PITCH], yaw=values[OXTS_YAW],
        vn=values[OXTS_VN], ve=values[OXTS_VE], vu=values[OXTS_VU],
        a_body=values[[OXTS_AX, OXTS_AY, OXTS_AZ]],
        w_body=values[[OXTS_WX, OXTS_WY, OXTS_WZ]],
        raw=values,
    )


def geodetic_to_enu(lat: np.ndarray, lon: np.ndarray, alt: np.ndarray) -> np.ndarray:
    """
    Local east-north-up positions anchored at the first record

    Spherical Earth of radius EARTH_RADIUS with the east axis scaled by cos(lat0).
    Good to well under a metre for sequences a few km across.
    """
    lat0 = np.radians(lat[0])
    east = EARTH_RADIUS * np.cos(lat0) * np.radians(lon - lon[0])
    north = EARTH_RADIUS * np.radians(lat - lat[0])
    up = alt - alt[0]
    return np.stack([east, north, up], axis=1)


def _read_timestamps(path: Path) -> np.ndarray:
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    try:
        stamps = pd.to_datetime(lines)
    except (ValueError, TypeError) as e:
        raise DataFormatError(f"unparsable timestamp ({e})", str(path)) from e
    ns = stamps.asi8
    return (ns - ns[0]) / 1e9


def parse_oxts(oxts_dir: Path) -> Tuple[ImuSequence, Trajectory]:
    """
    Read a KITTI raw `oxts/` directory

    Args:
        oxts_dir: Directory holding timestamps.txt and data/NNNNNNNNNN.txt

    Returns:
        (IMU sequence from body ax..az / wx..wz, ground-truth trajectory in local ENU)
    """
    oxts_dir = Path(oxts_dir)
    stamp_file = oxts_dir / "timestamps.txt"
    data_dir = oxts_dir / "data"
    if not stamp_file.is_file() or not data_dir.is_dir():
        raise StructuralError(f"{oxts_dir}: expected timestamps.txt and data/")

    times = _read_timestamps(stamp_file)
    frames = sorted(data_dir.glob("*.txt"))
    if len(frames) != len(times):
        raise StructuralError(f"{oxts_dir}: {len(times)} timestamps but {len(frames)} data files")

    records: List[OxtsRecord] = []
    for frame in frames:
        lines = [ln for ln in frame.read_text().splitlines() if ln.strip()]
        if len(lines) != 1:
            raise DataFormatError(f"expected one record, found {len(lines)}", str(frame))
        records.append(parse_oxts_line(lines[0], str(frame), 1))

    if np.any(np.diff(times) <= 0):
        raise InvalidInputError(f"{stamp_file}: timestamps are not strictly increasing")

    lat = np.array([r.lat for r in records])
    lon = np.array([r.lon for r in records])
    alt = np.array([r.alt for r in records])

    imu = ImuSequence(
        t=times,
        gyro=np.stack([r.w_body for r in records]),
        accel=np.stack([r.a_body for r in records]),
    )
    truth = Trajectory(
        times=times,
        rotations=from_rpy(
            np.array([r.roll for r in records]),
            np.array([r.pitch for r in records]),
            np.array([r.yaw for r in records]),
        ),
        positions=geodetic_to_enu(lat, lon, alt),
        velocities=np.array([[r.ve, r.vn, r.vu] for r in records]),
    )
    logger.info(f"✅ Parsed {len(records)} OXTS frames from {oxts_dir} ({times[-1]:.1f} s)")
    return imu, truth


# ============================================================================
# RESAMPLING
# ============================================================================

def resample_truth(truth: Trajectory, target_times: np.ndarray) -> Trajectory:
    """
    Interpolate ground truth onto new timestamps

    Positions and velocities are linear; rotations follow the SO(3) geodesic
    R0 exp(f log(R0^T R1)) between the bracketing samples.
    """
    target_times = np.asarray(target_times, dtype=float)
    if len(truth) == 0:
        raise InvalidInputError("cannot resample an empty trajectory")
    lo, hi = truth.times[0], truth.times[-1]
    if target_times.size and (target_times.min() < lo or target_times.max() > hi):
        raise InvalidInputError(
            f"target times [{target_times.min()}, {target_times.max()}] outside truth span [{lo}, {hi}]"
        )
    if len(truth) == 1:
        return truth.subset(np.zeros(len(target_times), dtype=int))

    positions = np.stack([np.interp(target_times, truth.times, truth.positions[:, i]) for i in range(3)], axis=1)
    velocities = np.stack([np.interp(target_times, truth.times, truth.velocities[:, i]) for i in range(3)], axis=1)

    idx = np.clip(np.searchsorted(truth.times, target_times, side="right") - 1, 0, len(truth) - 2)
    t0, t1 = truth.times[idx], truth.times[idx + 1]
    frac = (target_times - t0) / (t1 - t0)
    R0, R1 = truth.rotations[idx], truth.rotations[idx + 1]
    delta = so3_log(np.swapaxes(R0, -1, -2) @ R1)
    rotations = R0 @ so3_exp(frac[:, None] * delta)
    rotations = np.where((frac == 0.0)[:, None, None], R0, rotations)
    rotations = np.where((frac == 1.0)[:, None, None], R1, rotations)

    return Trajectory(times=target_times, rotations=rotations, positions=positions, velocities=velocities)


def align_truth(truth: Trajectory, times: np.ndarray, tol: float = 1e-6) -> Trajectory:
    """Pick truth rows at the given times, interpolating only when a time has no row"""
    times = np.asarray(times, dtype=float)
    idx = np.clip(np.searchsorted(truth.times, times), 0, len(truth) - 1)
    prev = np.clip(idx - 1, 0, len(truth) - 1)
    closer_prev = np.abs(truth.times[prev] - times) < np.abs(truth.times[idx] - times)
    idx = np.where(closer_prev, prev, idx)
    if np.all(np.abs(truth.times[idx] - times) <= tol):
        return truth.subset(idx)
    return resample_truth(truth, times)


# ============================================================================
# SYNTHESIS
# ============================================================================

def _profile(spec: SynthSpec, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample forward speed and yaw rate"""
    speed = np.full_like(t, spec.speed)
    if spec.kind == "straight":
        yaw_rate = np.zeros_like(t)
    elif spec.kind == "circle":
        yaw_rate = np.full_like(t, spec.yaw_rate)
    elif spec.kind == "figure-eight":
        yaw_rate = np.where(t < spec.duration / 2.0, spec.yaw_rate, -spec.yaw_rate)
    else:
        ends = np.cumsum([seg.duration for seg in spec.segments])
        which = np.minimum(np.searchsorted(ends, t, side="right"), len(spec.segments) - 1)
        speed = np.array([spec.segments[i].speed for i in which], dtype=float)
        yaw_rate = np.array([spec.segments[i].yaw_rate for i in which], dtype=float)
    return speed, yaw_rate


def synthesize(spec: SynthSpec) -> Tuple[ImuSequence, Trajectory]:
    """
    Generate ground truth, then the clean IMU stream that reproduces it under Euler integration

    With n = duration * rate, the IMU has n samples at t_k = k / rate and the truth has
    n + 1 states (the last one at t = duration). Sample k carries state k to state k + 1:
        w_k = log(R_k^T R_{k+1}) / dt
        a_k = R_k^T ((v_{k+1} - v_k) / dt + g)
        p_{k+1} = p_k + v_k dt

    Returns:
        (clean IMU sequence, truth trajectory)
    """
    n = max(1, int(round(spec.duration * spec.rate)))
    dt = spec.dt
    t = np.arange(n + 1) * dt

    speed, yaw_rate = _profile(spec, t)
    yaw = np.concatenate([[0.0], np.cumsum(yaw_rate[:-1] * dt)])
    rotations = from_rpy(np.zeros_like(yaw), np.zeros_like(yaw), yaw)

    slip = np.zeros(n + 1)
    if spec.lateral_slip_std > 0:
        rho = spec.slip_correlation
        z = box_muller(make_rng(spec.seed), (n,))
        for k in range(n):
            slip[k + 1] = rho * slip[k] + np.sqrt(1.0 - rho ** 2) * spec.lateral_slip_std * z[k]

    body_velocity = np.stack([speed, slip, np.zeros_like(speed)], axis=1)
    velocities = np.einsum("kij,kj->ki", rotations, body_velocity)
    positions = np.concatenate([np.zeros((1, 3)), np.cumsum(velocities[:-1] * dt, axis=0)])

    R_k, R_next = rotations[:-1], rotations[1:]
    gyro = so3_log(np.swapaxes(R_k, -1, -2) @ R_next) / dt
    world_accel = (velocities[1:] - velocities[:-1]) / dt + GRAVITY
    accel = np.einsum("kji,kj->ki", R_k, world_accel)

    imu = ImuSequence(t=t[:-1], gyro=gyro, accel=accel)
    truth = Trajectory(times=t, rotations=rotations, positions=positions, velocities=velocities)
    logger.info(f"✅ Synthesized {spec.kind}: {n} samples @ {spec.rate:g} Hz, path end {np.round(positions[-1], 3)}")
    return imu, truth


def inject_gap(seq: ImuSequence, t_start: float, duration: float) -> ImuSequence:
    """Drop every sample with t in [t_start, t_start + duration)"""
    keep = (seq.t < t_start) | (seq.t >= t_start + duration)
    dropped = int(np.count_nonzero(~keep))
    logger.info(f"Injected {duration:g} s gap at t={t_start:g} ({dropped} samples dropped)")
    return seq.subset(keep)


# ============================================================================
# CSV INTERCHANGE
# ============================================================================

def _parse_float(cell) -> float:
    """Correctly rounded parse of one CSV cell; anything unparseable becomes NaN"""
    try:
        return float(cell)
    except (TypeError, ValueError):
        return np.nan


def _read_numeric_csv(path: Path, columns: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise StructuralError(f"{path}: file not found")
    try:
        df = pd.read_csv(path, dtype=str)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataFormatError(f"unreadable CSV ({e})", str(path)) from e
    if list(df.columns) != list(columns):
        raise DataFormatError(f"expected header {','.join(columns)}, found {','.join(df.columns)}", str(path), 1)
    # float() is correctly rounded; pd.to_numeric is not
    numeric = df.map(_parse_float).astype(float)
    bad = numeric.isna().any(axis=1) | ~np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataFormatError("non-numeric or missing value", str(path), row + 2)
    return numeric


def read_imu_csv(path: Path) -> ImuSequence:
    df = _read_numeric_csv(path, IMU_COLUMNS)
    return ImuSequence(
        t=df["t"].to_numpy(),
        gyro=df[["wx", "wy", "wz"]].to_numpy(),
        accel=df[["ax", "ay", "az"]].to_numpy(),
    )


def write_imu_csv(seq: ImuSequence, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(np.column_stack([seq.t, seq.gyro, seq.accel]), columns=IMU_COLUMNS)
    df.to_csv(path, index=False, float_format="%.17g")
    return path


def read_trajectory_csv(path: Path) -> Trajectory:
    df = _read_numeric_csv(path, TRAJECTORY_COLUMNS)
    return Trajectory(
        times=df["t"].to_numpy(),
        rotations=from_quat_wxyz(df[["qw", "qx", "qy", "qz"]].to_numpy()),
        positions=df[["px", "py", "pz"]].to_numpy(),
        velocities=df[["vx", "vy", "vz"]].to_numpy(),
    )


def write_trajectory_csv(traj: Trajectory, path: Path) -> Path:
    """Header t,px,py,pz,qw,qx,qy,qz,vx,vy,vz; Hamilton quaternion, w first"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    quats = to_quat_wxyz(traj.rotations) if len(traj) else np.zeros((0, 4))
    df = pd.DataFrame(
        np.column_stack([traj.times, traj.positions, quats, traj.velocities]),
        columns=TRAJECTORY_COLUMNS,
    )
    df.to_csv(path, index=False, float_format="%.17g")
    return path


def load_sequence(path: Path) -> Tuple[ImuSequence, Trajectory]:
    """
    Load a sequence directory: either KITTI raw (`oxts/`) or `imu.csv` + `truth.csv`
    """
    path = Path(path)
    if (path / "oxts").is_dir():
        return parse_oxts(path / "oxts")
    if (path / "imu.csv").is_file() and (path / "truth.csv").is_file():
        return read_imu_csv(path / "imu.csv"), read_trajectory_csv(path / "truth.csv")
    raise StructuralError(f"{path}: neither oxts/ nor imu.csv + truth.csv found")


def slice_time(
    seq: ImuSequence,
    truth: Trajectory,
    t_start: float = 0.0,
    t_end: Optional[float] = None
) -> Tuple[ImuSequence, Trajectory]:
    """Restrict both streams to t_start <= t < t_end (truth keeps its row at t_end)"""
    end = np.inf if t_end is None else t_end
    imu_mask = (seq.t >= t_start) & (seq.t < end)
    truth_mask = (truth.times >= t_start) & (truth.times <= end)
    return seq.subset(imu_mask), truth.subset(truth_mask)


# ============================================================================
# SPLIT MANIFEST
# ============================================================================

def make_split_manifest(
    sequences: Iterable[str],
    train_seqs: Optional[Iterable[str]] = None,
    test_seqs: Optional[Iterable[str]] = None,
    train_seconds: float = 40.0
) -> SplitManifest:
    """
    Train on the head of each training sequence, validate on its remainder, test on the rest

    Args:
        sequences: Names of available sequences
        train_seqs: Sequences split into train/val (default 06-14)
        test_seqs: Held-out sequences (default 01-05)
        train_seconds: Length of the training head of each training sequence

    Returns:
        SplitManifest
    """
    available = set(sequences)
    train_seqs = list(train_seqs) if train_seqs is not None else DEFAULT_TRAIN_SEQS
    test_seqs = list(test_seqs) if test_seqs is not None else DEFAULT_TEST_SEQS
    manifest = SplitManifest()
    for seq in train_seqs:
        if seq not in available:
            logger.warning(f"⚠️  Training sequence {seq} not found, skipped")
            continue
        manifest.train.append(SplitEntry(seq=seq, t_start=0.0, t_end=train_seconds))
        manifest.val.append(SplitEntry(seq=seq, t_start=train_seconds, t_end=None))
    for seq in test_seqs:
        if seq not in available:
            logger.warning(f"⚠️  Test sequence {seq} not found, skipped")
            continue
        manifest.test.append(SplitEntry(seq=seq, t_start=0.0, t_end=None))
    return manifest


def save_split_manifest(manifest: SplitManifest, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2))
    return path


def load_split_manifest(path: Path) -> SplitManifest:
    path = Path(path)
    if not path.is_file():
        raise StructuralError(f"{path}: split manifest not found")
    return SplitManifest.model_validate_json(path.read_text())


def load_split(root: Path, entries: List[SplitEntry]) -> List[Tuple[str, ImuSequence, Trajectory]]:
    """Load every entry of one split, failing with the full list of absent sequences"""
    root = Path(root)
    missing = sorted({e.seq for e in entries if not (root / e.seq).is_dir()})
    if missing:
        raise StructuralError(f"{root}: missing sequences {', '.join(missing)}")
    loaded = []
    cache = {}
    for entry in entries:
        if entry.seq not in cache:
            cache[entry.seq] = load_sequence(root / entry.seq)
        imu, truth = cache[entry.seq]
        imu_part, truth_part = slice_time(imu, truth, entry.t_start, entry.t_end)
        loaded.append((entry.seq, imu_part, truth_part))
    return loaded
