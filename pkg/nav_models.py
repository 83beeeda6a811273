"""
SpikeNav Data Models - Configuration and Records
Every tunable of the SNN-InEKF toolkit plus the records it writes to disk
"""
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from nav_errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "SPIKENAV_"


# ============================================================================
# NETWORK
# ============================================================================

class LifParams(BaseModel):
    """Leaky integrate-and-fire neuron parameters"""
    beta: float = Field(0.9, gt=0, le=1, description="Membrane decay factor per segment")
    u_thr: float = Field(1.0, description="Threshold potential")
    v_reset: float = Field(0.0, description="Reset potential after a spike")
    alpha: float = Field(2.0, gt=0, description="Arctan surrogate steepness")
    ts: int = Field(4, ge=1, description="Segments per time step")

    @model_validator(mode="after")
    def _threshold_above_reset(self):
        if not self.u_thr > self.v_reset:
            raise ValueError(f"u_thr ({self.u_thr}) must exceed v_reset ({self.v_reset})")
        return self


class NetConfig(BaseModel):
    """Spiking transformer shape"""
    window_n: int = Field(128, ge=1, description="IMU samples per input window")
    d_model: int = Field(32, ge=1, description="Token feature width")
    n_heads: int = Field(4, ge=1, description="Attention heads")
    n_blocks: int = Field(2, ge=1, description="Spiking transformer blocks")
    ts: int = Field(4, ge=1, description="Segments per time step")
    dropout: float = Field(0.0, ge=0, lt=1, description="Dropout in embedding and MLP sublayers")
    mlp_ratio: int = Field(4, ge=1, description="MLP hidden width as a multiple of d_model")
    channels: Literal[6] = Field(6, description="IMU channels (gyro xyz, accel xyz)")
    beta_s: float = Field(0.1, gt=0, description="Calibration scaling: C^-1 = 10^(beta_s * y_c)")

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self

    @classmethod
    def desk(cls) -> "NetConfig":
        return cls(window_n=128, d_model=32, n_heads=4, n_blocks=2)

    @classmethod
    def full_scale(cls) -> "NetConfig":
        return cls(window_n=500, d_model=256, n_heads=4, n_blocks=2, dropout=0.1)


# ============================================================================
# TRAINING
# ============================================================================

class TrainConfig(BaseModel):
    """Optimizer, schedule and windowing for end-to-end training"""
    lr: float = Field(1e-3, gt=0, description="Base learning rate")
    weight_decay: float = Field(5e-2, ge=0, description="Decoupled weight decay")
    dropout: float = Field(0.1, ge=0, lt=1, description="Dropout fraction during training")
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(8, ge=1)
    huber_delta: float = Field(4e-4, gt=0, description="Huber transition point (SI units)")
    window_n: int = Field(128, ge=1)
    stride: Optional[int] = Field(None, ge=1, description="Window stride, defaults to window_n // 2")
    seed: int = Field(0, ge=0)
    restart_period: int = Field(50, ge=1, description="Cosine warm-restart period in epochs")
    checkpoint_every: int = Field(10, ge=1, description="Write a checkpoint every K epochs")
    grad_clip: Optional[float] = Field(None, gt=0, description="Max global gradient norm")

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride is not None else max(1, self.window_n // 2)

    @classmethod
    def desk(cls) -> "TrainConfig":
        return cls()

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        return cls(lr=1e-4, epochs=1000, window_n=500, restart_period=100)


# ============================================================================
# IMU CORRUPTION
# ============================================================================

class CorruptionSpec(BaseModel):
    """Low-cost IMU noise-injection protocol"""
    gyro_noise_std: float = Field(0.0, ge=0, description="Gyro white noise std (rad/s)")
    gyro_bias_range: Tuple[float, float] = Field((0.0, 0.0), description="Uniform turn-on gyro bias range (rad/s)")
    accel_noise_std: float = Field(0.0, ge=0, description="Accel white noise std (m/s^2)")
    accel_bias_range: Tuple[float, float] = Field((0.0, 0.0), description="Uniform turn-on accel bias range (m/s^2)")
    gyro_bias_walk_std: float = Field(0.0, ge=0, description="Gyro bias random walk (rad/s per sqrt(s))")
    accel_bias_walk_std: float = Field(0.0, ge=0, description="Accel bias random walk (m/s^2 per sqrt(s))")
    enable_g_sensitivity: bool = Field(False, description="Couple acceleration into the gyro (simulator only)")
    g_sensitivity: List[List[float]] = Field(
        default_factory=lambda: [[0.0] * 3 for _ in range(3)],
        description="3x3 g-sensitivity matrix A (rad/s per m/s^2)"
    )
    rng_seed: int = Field(0, ge=0)

    class Config:
        json_schema_extra = {
            "example": {
                "gyro_noise_std": 1e-3,
                "gyro_bias_range": [0.015, 0.025],
                "accel_noise_std": 1e-2,
                "accel_bias_range": [0.45, 0.55],
                "rng_seed": 7
            }
        }

    @model_validator(mode="after")
    def _ranges_ordered(self):
        for name in ("gyro_bias_range", "accel_bias_range"):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"{name}: low ({low}) > high ({high})")
        if len(self.g_sensitivity) != 3 or any(len(row) != 3 for row in self.g_sensitivity):
            raise ValueError("g_sensitivity must be 3x3")
        return self

    @classmethod
    def kitti_lowcost(cls, seed: int = 0) -> "CorruptionSpec":
        """Low-cost MEMS protocol applied to KITTI's high-grade OXTS IMU"""
        return cls(
            gyro_noise_std=1e-3,
            gyro_bias_range=(0.015, 0.025),
            accel_noise_std=1e-2,
            accel_bias_range=(0.45, 0.55),
            rng_seed=seed,
        )


CORRUPTION_PRESETS = {
    "kitti-lowcost": CorruptionSpec.kitti_lowcost,
}


# ============================================================================
# SYNTHESIS
# ============================================================================

class SynthSegment(BaseModel):
    """One leg of a piecewise synthetic trajectory"""
    duration: float = Field(..., gt=0, description="Seconds")
    speed: float = Field(1.0, description="Body-forward speed (m/s)")
    yaw_rate: float = Field(0.0, description="Yaw rate (rad/s)")


class SynthSpec(BaseModel):
    """Synthetic trajectory stimulus"""
    kind: Literal["straight", "circle", "figure-eight", "piecewise"] = "circle"
    duration: float = Field(60.0, gt=0, description="Seconds")
    rate: float = Field(100.0, gt=0, description="Sample rate (Hz)")
    speed: float = Field(1.0, description="Body-forward speed (m/s)")
    yaw_rate: float = Field(0.1, description="Yaw rate for circle / figure-eight (rad/s)")
    segments: List[SynthSegment] = Field(default_factory=list, description="Legs for kind=piecewise")
    lateral_slip_std: float = Field(0.0, ge=0, description="AR(1) lateral slip velocity std (m/s)")
    slip_correlation: float = Field(0.99, ge=0, lt=1, description="AR(1) coefficient per sample")
    seed: int = Field(0, ge=0, description="Seed for the slip disturbance")

    @model_validator(mode="after")
    def _segments_for_piecewise(self):
        if self.kind == "piecewise" and not self.segments:
            raise ValueError("kind=piecewise needs at least one segment")
        return self

    @property
    def dt(self) -> float:
        return 1.0 / self.rate


# ============================================================================
# FILTER
# ============================================================================

class FilterConfig(BaseModel):
    """InEKF tuning: initial covariance, process noise, pseudo-measurement noise"""
    p0_attitude: float = Field(1e-4, ge=0, description="rad^2")
    p0_velocity: float = Field(1e-2, ge=0, description="(m/s)^2")
    p0_position: float = Field(1e-2, ge=0, description="m^2")
    p0_bias_gyro: float = Field(1e-4, ge=0, description="(rad/s)^2")
    p0_bias_accel: float = Field(1e-4, ge=0, description="(m/s^2)^2")
    p0_extrinsic_rot: float = Field(1e-6, ge=0, description="rad^2")
    p0_extrinsic_pos: float = Field(1e-6, ge=0, description="m^2")

    q_gyro: float = Field(2e-4, ge=0, description="Gyro noise density")
    q_accel: float = Field(1e-3, ge=0, description="Accel noise density")
    q_bias_gyro: float = Field(1e-8, ge=0, description="Gyro bias random walk")
    q_bias_accel: float = Field(1e-6, ge=0, description="Accel bias random walk")
    q_extrinsic_rot: float = Field(1e-8, ge=0, description="Extrinsic rotation random walk")
    q_extrinsic_pos: float = Field(1e-8, ge=0, description="Lever arm random walk")

    sigma_lat2: float = Field(0.01, gt=0, description="Lateral velocity pseudo-measurement variance (m/s)^2")
    sigma_up2: float = Field(0.01, gt=0, description="Upward velocity pseudo-measurement variance (m/s)^2")

    gravity: Tuple[float, float, float] = Field((0.0, 0.0, 9.80665), description="World-frame gravity (m/s^2)")
    gap_threshold: float = Field(0.05, gt=0, description="dt above this is a data gap; dt is capped to it")
    joseph: bool = Field(False, description="Joseph-form covariance update")
    estimate_bias: bool = Field(False, description="Let the filter estimate IMU biases")
    updates_enabled: bool = Field(True, description="False runs open-loop dead reckoning")
    cond_limit: float = Field(1e12, gt=1, description="Skip the update when cond(S) exceeds this")
    ortho_tol: float = Field(1e-9, gt=0, description="Re-orthonormalize rotations beyond this drift")


# ============================================================================
# RUN CONFIG
# ============================================================================

class PathsConfig(BaseModel):
    """Where data comes from and results go"""
    dataset_root: Path = Field(Path("data"), description="Root holding one directory per sequence")
    output_dir: Path = Field(Path("out"), description="Destination for checkpoints, logs, estimates")
    checkpoint: Optional[Path] = Field(None, description="SNN checkpoint for adaptive runs")
    split_manifest: Optional[Path] = Field(None, description="Train/val/test manifest")


class RunConfig(BaseModel):
    """Top-level toolkit configuration (one JSON file, SPIKENAV_* env overrides)"""
    paths: PathsConfig = Field(default_factory=PathsConfig)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    net: NetConfig = Field(default_factory=NetConfig.desk)
    lif: LifParams = Field(default_factory=LifParams)
    train: TrainConfig = Field(default_factory=TrainConfig.desk)
    corruption: CorruptionSpec = Field(default_factory=CorruptionSpec)
    mode: Literal["adaptive", "static", "open-loop"] = Field("static", description="Filter noise mode")

    class Config:
        json_schema_extra = {
            "example": {
                "paths": {"dataset_root": "data/synth", "output_dir": "out/desk"},
                "filter": {"sigma_lat2": 0.01, "gap_threshold": 0.05},
                "net": {"window_n": 128, "d_model": 32},
                "train": {"epochs": 200, "seed": 3},
                "mode": "adaptive"
            }
        }

    @model_validator(mode="after")
    def _windows_agree(self):
        if self.train.window_n != self.net.window_n:
            raise ValueError(f"train.window_n ({self.train.window_n}) must equal net.window_n ({self.net.window_n})")
        return self

    @classmethod
    def load(cls, path: Optional[Path] = None, environ: Optional[Dict[str, str]] = None) -> "RunConfig":
        """
        Build a RunConfig from an optional JSON file plus environment overrides

        Args:
            path: JSON config file (optional)
            environ: Mapping to read overrides from (defaults to os.environ after load_dotenv)

        Returns:
            Validated RunConfig
        """
        data: dict = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be an object")

        if environ is None:
            load_dotenv()
            environ = dict(os.environ)
        apply_env_overrides(data, environ)

        try:
            config = cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid configuration: {e}") from e
        logger.debug(f"Loaded config (mode={config.mode}, window_n={config.net.window_n})")
        return config


def apply_env_overrides(data: dict, environ: Dict[str, str]) -> dict:
    """
    Merge SPIKENAV_<BLOCK>__<FIELD>=value pairs into a config dict in place

    Values are parsed as JSON when possible (numbers, booleans, lists), otherwise kept as strings.
    """
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [part.lower() for part in key[len(ENV_PREFIX):].split("__") if part]
        if not path:
            continue
        raw = environ[key]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        for part in path[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[path[-1]] = value
        logger.debug(f"Config override {'.'.join(path)} = {value!r}")
    return data


# ============================================================================
# RECORDS
# ============================================================================

class LengthBreakdown(BaseModel):
    """Errors over subsequences of one target length"""
    rte_percent: float = Field(..., ge=0)
    rre_deg_per_km: float = Field(..., ge=0)
    count: int = Field(..., ge=0)


class MetricReport(BaseModel):
    """Relative translation / rotation error report"""
    rte_percent: float = Field(0.0, ge=0, description="Average translational error (% of distance)")
    rre_deg_per_km: float = Field(0.0, ge=0, description="Average rotational error (deg/km)")
    per_length: Dict[int, LengthBreakdown] = Field(default_factory=dict)
    n_pairs: int = Field(0, ge=0)
    available: bool = Field(True, description="False when the truth path is shorter than 100 m")
    path_length_m: float = Field(0.0, ge=0)
    step: int = Field(10, ge=1, description="Start-index subsampling")


class SplitEntry(BaseModel):
    seq: str
    t_start: float = 0.0
    t_end: Optional[float] = None


class SplitManifest(BaseModel):
    """Train / validation / test partition of recorded sequences"""
    train: List[SplitEntry] = Field(default_factory=list)
    val: List[SplitEntry] = Field(default_factory=list)
    test: List[SplitEntry] = Field(default_factory=list)


class TrainLogRecord(BaseModel):
    """One JSON-lines record per epoch"""
    epoch: int
    loss: float
    val_loss: Optional[float] = None
    lr: float
    grad_norm: float
    wall_ms: float


class CorruptionSidecar(BaseModel):
    """What corrupt() drew, stored next to the corrupted CSV"""
    source: str
    preset: Optional[str] = None
    seed: int
    gyro_bias: List[float]
    accel_bias: List[float]
    n_samples: int
    spec: CorruptionSpec


class RunMeta(BaseModel):
    """Sidecar for a filter run"""
    mode: str
    n_samples: int
    runtime_s: float
    checkpoint: Optional[str] = None
    gap_events: List[Tuple[int, float, float]] = Field(default_factory=list, description="(index, t, raw dt)")
    skipped_updates: int = 0
