"""
IMU Error Model - Low-cost MEMS corruption and learned correction
Forward model turns clean IMU streams into low-cost ones; the inverse applies a decoded correction

Forward (per sample):
    gyro  = diag(S_w) M_w w + A a + b_w + bias_draw_w + walk_w + noise_w
    accel = diag(S_a) M_a a       + b_a + bias_draw_a + walk_a + noise_a
Inverse:
    u = c_inv * u_raw - bias        (bias already folds C^-1 (b + noise))
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
import torch

from nav_errors import InvalidInputError
from nav_models import CorruptionSpec

logger = logging.getLogger(__name__)

Array = Union[np.ndarray, torch.Tensor]


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class ImuSample:
    """One timestamped IMU reading (rad/s, m/s^2)"""
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])


@dataclass
class ImuSequence:
    """Columnar IMU stream: t (n,), gyro (n, 3), accel (n, 3)"""
    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        n = len(self.t)
        if self.gyro.shape[0] != n or self.accel.shape[0] != n:
            raise InvalidInputError(
                f"IMU columns disagree: t={n}, gyro={self.gyro.shape[0]}, accel={self.accel.shape[0]}"
            )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> ImuSample:
        return ImuSample(t=float(self.t[k]), gyro=self.gyro[k].copy(), accel=self.accel[k].copy())

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @classmethod
    def from_samples(cls, samples: List[ImuSample]) -> "ImuSequence":
        if not samples:
            return cls.empty()
        return cls(
            t=np.array([s.t for s in samples]),
            gyro=np.stack([s.gyro for s in samples]),
            accel=np.stack([s.accel for s in samples]),
        )

    @classmethod
    def empty(cls) -> "ImuSequence":
        return cls(t=np.zeros(0), gyro=np.zeros((0, 3)), accel=np.zeros((0, 3)))

    def stacked(self) -> np.ndarray:
        """(n, 6) gyro then accel"""
        return np.concatenate([self.gyro, self.accel], axis=1)

    def subset(self, index) -> "ImuSequence":
        return ImuSequence(t=self.t[index], gyro=self.gyro[index], accel=self.accel[index])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.gyro)) and np.all(np.isfinite(self.accel)))

    def is_sorted(self) -> bool:
        return bool(np.all(np.diff(self.t) >= 0))


@dataclass
class ErrorModel:
    """Calibration matrix blocks, biases and white-noise levels of a MEMS IMU"""
    S_w: np.ndarray = field(default_factory=lambda: np.ones(3))
    S_a: np.ndarray = field(default_factory=lambda: np.ones(3))
    M_w: np.ndarray = field(default_factory=lambda: np.eye(3))
    M_a: np.ndarray = field(default_factory=lambda: np.eye(3))
    A: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    b_w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_w: float = 0.0
    sigma_a: float = 0.0

    def __post_init__(self):
        for name in ("S_w", "S_a", "b_w", "b_a"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        for name in ("M_w", "M_a", "A"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3, 3))
        if np.any(self.S_w <= 0) or np.any(self.S_a <= 0):
            raise InvalidInputError("scale factors must be positive")
        if not (np.allclose(np.diag(self.M_w), 1.0) and np.allclose(np.diag(self.M_a), 1.0)):
            raise InvalidInputError("misalignment matrices must have unit diagonal")
        if self.sigma_w < 0 or self.sigma_a < 0:
            raise InvalidInputError("noise stds must be non-negative")

    @classmethod
    def identity(cls) -> "ErrorModel":
        return cls()

    @classmethod
    def from_spec(cls, spec: CorruptionSpec) -> "ErrorModel":
        """Simulator-side model: identity calibration, A only when CorruptionSpec enables it"""
        A = np.asarray(spec.g_sensitivity, dtype=float) if spec.enable_g_sensitivity else np.zeros((3, 3))
        return cls(A=A)

    @property
    def C1(self) -> np.ndarray:
        return np.diag(self.S_w) @ self.M_w

    @property
    def C2(self) -> np.ndarray:
        return np.diag(self.S_a) @ self.M_a


@dataclass
class Correction:
    """Diagonal of C^-1 and the folded additive bias, gyro first then accel"""
    c_inv_diag: Array
    bias: Array

    @classmethod
    def identity(cls) -> "Correction":
        return cls(c_inv_diag=np.ones(6), bias=np.zeros(6))


@dataclass
class NetOutput:
    """The 14-dim network head split into its c, b and r parts"""
    c: Array
    b: Array
    r: Array

    @classmethod
    def from_vector(cls, y: Array) -> "NetOutput":
        if y.shape[-1] != 14:
            raise InvalidInputError(f"network output must have 14 components, got {y.shape[-1]}")
        return cls(c=y[..., 0:6], b=y[..., 6:12], r=y[..., 12:14])

    @classmethod
    def zeros(cls) -> "NetOutput":
        return cls.from_vector(np.zeros(14))

    def to_vector(self) -> Array:
        if isinstance(self.c, torch.Tensor):
            return torch.cat([self.c, self.b, self.r], dim=-1)
        return np.concatenate([self.c, self.b, self.r], axis=-1)


# ============================================================================
# RANDOMNESS
# ============================================================================

def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator so fixtures replay identically everywhere"""
    return np.random.Generator(np.random.Philox(seed))


def box_muller(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Standard normal draws from uniform pairs"""
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)          # (0, 1], keeps log finite
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2.0 * np.pi * u2), radius * np.sin(2.0 * np.pi * u2)])
    return z[:n].reshape(shape)


def _draw_biases(rng: np.random.Generator, spec: CorruptionSpec) -> Tuple[np.ndarray, np.ndarray]:
    g_low, g_high = spec.gyro_bias_range
    a_low, a_high = spec.accel_bias_range
    gyro_bias = g_low + (g_high - g_low) * rng.random(3)
    accel_bias = a_low + (a_high - a_low) * rng.random(3)
    return gyro_bias, accel_bias


def draw_biases(spec: CorruptionSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    The per-sequence turn-on biases corrupt() will add for this spec

    Biases are the first draws of the seeded stream, so this matches corrupt() exactly.
    """
    return _draw_biases(make_rng(spec.rng_seed), spec)


# ============================================================================
# FORWARD MODEL
# ============================================================================

def corrupt(seq: ImuSequence, spec: CorruptionSpec, model: Optional[ErrorModel] = None) -> ImuSequence:
    """
    Turn a clean IMU stream into a low-cost one

    Args:
        seq: Clean IMU sequence (true angular rate and specific force)
        spec: Noise-injection protocol (stds, bias ranges, seed)
        model: Deterministic part of the error model (defaults to ErrorModel.from_spec)

    Returns:
        Corrupted sequence with the same timestamps
    """
    if len(seq) == 0:
        return ImuSequence.empty()
    model = model if model is not None else ErrorModel.from_spec(spec)
    n = len(seq)

    rng = make_rng(spec.rng_seed)
    gyro_bias, accel_bias = _draw_biases(rng, spec)
    gyro_noise = box_muller(rng, (n, 3))
    accel_noise = box_muller(rng, (n, 3))

    gyro_std = float(np.hypot(spec.gyro_noise_std, model.sigma_w))
    accel_std = float(np.hypot(spec.accel_noise_std, model.sigma_a))

    gyro = seq.gyro @ model.C1.T + seq.accel @ model.A.T + model.b_w + gyro_bias + gyro_std * gyro_noise
    accel = seq.accel @ model.C2.T + model.b_a + accel_bias + accel_std * accel_noise

    if spec.gyro_bias_walk_std > 0 or spec.accel_bias_walk_std > 0:
        dt = np.diff(seq.t, prepend=seq.t[0])
        sqrt_dt = np.sqrt(np.clip(dt, 0.0, None))[:, None]
        gyro = gyro + np.cumsum(spec.gyro_bias_walk_std * sqrt_dt * box_muller(rng, (n, 3)), axis=0)
        accel = accel + np.cumsum(spec.accel_bias_walk_std * sqrt_dt * box_muller(rng, (n, 3)), axis=0)

    logger.debug(
        f"Corrupted {n} samples (seed={spec.rng_seed}, gyro bias={np.round(gyro_bias, 4)}, "
        f"accel bias={np.round(accel_bias, 4)})"
    )
    return ImuSequence(t=seq.t.copy(), gyro=gyro, accel=accel)


# ============================================================================
# INVERSE MODEL
# ============================================================================

def correct(u_raw: Array, corr: Correction) -> Array:
    """u = c_inv * u_raw - bias on stacked (..., 6) readings, numpy or torch"""
    return corr.c_inv_diag * u_raw - corr.bias


def apply_correction(raw: ImuSample, corr: Correction) -> ImuSample:
    u = correct(raw.stacked(), corr)
    return ImuSample(t=raw.t, gyro=np.asarray(u[:3]), accel=np.asarray(u[3:]))


def decode_correction(y: NetOutput, beta_s: float) -> Correction:
    """C^-1 = diag(10^(beta_s * y_c)), bias = y_b"""
    return Correction(c_inv_diag=10.0 ** (beta_s * y.c), bias=y.b)


def correction_from_error_model(
    model: ErrorModel,
    gyro_bias: Optional[np.ndarray] = None,
    accel_bias: Optional[np.ndarray] = None
) -> Correction:
    """
    Analytic inverse of a diagonal error model (no misalignment, no g-sensitivity)

    Args:
        model: Error model whose M_w, M_a are identity and A is zero
        gyro_bias: Extra gyro bias on top of model.b_w (e.g. the sidecar draw)
        accel_bias: Extra accel bias on top of model.b_a

    Returns:
        Correction that exactly undoes the noise-free forward model
    """
    if not (np.allclose(model.M_w, np.eye(3)) and np.allclose(model.M_a, np.eye(3)) and not np.any(model.A)):
        raise InvalidInputError("analytic inverse needs a diagonal model without g-sensitivity")
    c_inv = 1.0 / np.concatenate([model.S_w, model.S_a])
    total_bias = np.concatenate([
        model.b_w + (gyro_bias if gyro_bias is not None else 0.0),
        model.b_a + (accel_bias if accel_bias is not None else 0.0),
    ])
    return Correction(c_inv_diag=c_inv, bias=c_inv * total_bias)
