"""
Invariant EKF - IMU propagation with nonholonomic velocity pseudo-measurements
Right-invariant error on (R, v, p); biases and robot-IMU extrinsics as additive / left-multiplied error states

Error-state ordering (21): dR, dv, dp, db_w, db_a, dR_c, dp_c.
All operations are torch float64 and accept leading batch dimensions, so the
trainer can differentiate a batch of window rollouts end to end.
"""
import logging
from dataclasses import dataclass, fields
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from datasets import Trajectory
from geom3d import (
    ortho_error_torch,
    renormalize_torch,
    skew_torch,
    so3_exp_torch,
    so3_left_jacobian_torch,
)
from imu_model import Correction, ImuSequence, NetOutput, correct
from nav_errors import InvalidInputError
from nav_models import FilterConfig

logger = logging.getLogger(__name__)

DTYPE = torch.float64
STATE_DIM = 21

StepMonitor = Callable[[int, "FilterState", torch.Tensor, bool], None]


# ============================================================================
# STATE
# ============================================================================

@dataclass
class FilterState:
    """R, v, p in the world frame; IMU biases; robot-to-IMU rotation and lever arm"""
    R: torch.Tensor
    v: torch.Tensor
    p: torch.Tensor
    b_w: torch.Tensor
    b_a: torch.Tensor
    R_c: torch.Tensor
    p_c: torch.Tensor

    @classmethod
    def identity(cls, batch_shape: Tuple[int, ...] = ()) -> "FilterState":
        eye = torch.eye(3, dtype=DTYPE).expand(*batch_shape, 3, 3).clone()
        zero = torch.zeros(*batch_shape, 3, dtype=DTYPE)
        return cls(R=eye, v=zero.clone(), p=zero.clone(), b_w=zero.clone(), b_a=zero.clone(),
                   R_c=eye.clone(), p_c=zero.clone())

    @classmethod
    def from_truth(cls, truth: Trajectory, index: int = 0) -> "FilterState":
        """Start from a ground-truth pose with zero biases and identity extrinsics"""
        state = cls.identity()
        state.R = torch.as_tensor(truth.rotations[index], dtype=DTYPE).clone()
        state.v = torch.as_tensor(truth.velocities[index], dtype=DTYPE).clone()
        state.p = torch.as_tensor(truth.positions[index], dtype=DTYPE).clone()
        return state

    @classmethod
    def stack(cls, states: Sequence["FilterState"]) -> "FilterState":
        return cls(**{f.name: torch.stack([getattr(s, f.name) for s in states]) for f in fields(cls)})

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(getattr(self, f.name)).all()) for f in fields(self))


def _diag21(blocks: Sequence[float]) -> torch.Tensor:
    return torch.tensor(np.repeat(np.asarray(blocks, dtype=float), 3), dtype=DTYPE)


def default_covariance(cfg: FilterConfig) -> torch.Tensor:
    """Diagonal P0; bias blocks are zero when the filter does not estimate biases"""
    bias_w = cfg.p0_bias_gyro if cfg.estimate_bias else 0.0
    bias_a = cfg.p0_bias_accel if cfg.estimate_bias else 0.0
    return torch.diag(_diag21([
        cfg.p0_attitude, cfg.p0_velocity, cfg.p0_position,
        bias_w, bias_a, cfg.p0_extrinsic_rot, cfg.p0_extrinsic_pos,
    ]))


def process_noise(cfg: FilterConfig) -> torch.Tensor:
    """
    Diagonal Q over (gyro noise, accel noise, -, gyro bias walk, accel bias walk,
    extrinsic rotation walk, lever-arm walk); the position slot carries no noise
    """
    bias_w = cfg.q_bias_gyro if cfg.estimate_bias else 0.0
    bias_a = cfg.q_bias_accel if cfg.estimate_bias else 0.0
    return _diag21([
        cfg.q_gyro, cfg.q_accel, 0.0,
        bias_w, bias_a, cfg.q_extrinsic_rot, cfg.q_extrinsic_pos,
    ])


def gravity_vector(cfg: FilterConfig) -> torch.Tensor:
    return torch.tensor(cfg.gravity, dtype=DTYPE)


# ============================================================================
# PROPAGATION
# ============================================================================

def _as_dt(dt, like: torch.Tensor) -> torch.Tensor:
    dt = torch.as_tensor(dt, dtype=like.dtype)
    if torch.any(dt <= 0):
        raise InvalidInputError(f"dt must be positive, got {dt.min().item()}")
    return dt


def error_jacobians(state: FilterState, g: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Continuous-time F and G of the right-invariant error dynamics

    Returns:
        F (..., 21, 21), G (..., 21, 21)
    """
    batch = state.R.shape[:-2]
    R = state.R
    eye3 = torch.eye(3, dtype=R.dtype).expand(*batch, 3, 3)
    v_skew_R = skew_torch(state.v) @ R
    p_skew_R = skew_torch(state.p) @ R

    F = R.new_zeros(*batch, STATE_DIM, STATE_DIM)
    F[..., 0:3, 9:12] = -R
    F[..., 3:6, 0:3] = -skew_torch(g).expand(*batch, 3, 3)
    F[..., 3:6, 9:12] = -v_skew_R
    F[..., 3:6, 12:15] = -R
    F[..., 6:9, 3:6] = eye3
    F[..., 6:9, 9:12] = -p_skew_R

    G = torch.eye(STATE_DIM, dtype=R.dtype).expand(*batch, STATE_DIM, STATE_DIM).clone()
    G[..., 0:3, 0:3] = R
    G[..., 3:6, 0:3] = v_skew_R
    G[..., 6:9, 0:3] = p_skew_R
    G[..., 3:6, 3:6] = R
    return F, G


def propagate_covariance(
    state: FilterState, P: torch.Tensor, dt: torch.Tensor, q: torch.Tensor, g: torch.Tensor
) -> torch.Tensor:
    """P' = Phi (P + G Q G^T dt^2) Phi^T with Phi the third-order series of exp(F dt)"""
    F, G = error_jacobians(state, g)
    Fdt = F * dt[..., None, None]
    Fdt2 = Fdt @ Fdt
    eye = torch.eye(STATE_DIM, dtype=P.dtype)
    Phi = eye + Fdt + 0.5 * Fdt2 + (Fdt2 @ Fdt) / 6.0
    Qd = (G * q) @ G.transpose(-1, -2) * (dt ** 2)[..., None, None]
    P_new = Phi @ (P + Qd) @ Phi.transpose(-1, -2)
    return 0.5 * (P_new + P_new.transpose(-1, -2))


def propagate(
    state: FilterState,
    P: torch.Tensor,
    u: torch.Tensor,
    dt,
    q: torch.Tensor,
    g: torch.Tensor
) -> Tuple[FilterState, torch.Tensor]:
    """
    One explicit-Euler step of the strapdown equations plus covariance prediction

    Args:
        state: Current state
        P: Covariance (..., 21, 21)
        u: Corrected IMU reading (..., 6), gyro then accel
        dt: Step length (s), positive
        q: Process noise diagonal (21,)
        g: World gravity (3,)

    Returns:
        (next state, next covariance)
    """
    if not bool(torch.isfinite(u).all()):
        raise InvalidInputError("non-finite IMU input")
    dt = _as_dt(dt, P)
    dt3 = dt[..., None]

    omega = u[..., 0:3] - state.b_w
    acc = u[..., 3:6] - state.b_a
    world_acc = (state.R @ acc[..., None]).squeeze(-1) - g

    P_new = propagate_covariance(state, P, dt, q, g)
    nxt = FilterState(
        R=state.R @ so3_exp_torch(omega * dt3),
        v=state.v + world_acc * dt3,
        p=state.p + state.v * dt3,
        b_w=state.b_w,
        b_a=state.b_a,
        R_c=state.R_c,
        p_c=state.p_c,
    )
    return nxt, P_new


# ============================================================================
# PSEUDO-MEASUREMENT
# ============================================================================

def body_velocity(state: FilterState, omega_unbiased: torch.Tensor) -> torch.Tensor:
    """(v_fwd, v_lat, v_up) = R_c^T (R^T v + w x p_c)"""
    v_imu = (state.R.transpose(-1, -2) @ state.v[..., None]).squeeze(-1)
    w = v_imu + torch.cross(omega_unbiased, state.p_c, dim=-1)
    return (state.R_c.transpose(-1, -2) @ w[..., None]).squeeze(-1)


def measurement_jacobian(state: FilterState, omega_unbiased: torch.Tensor) -> torch.Tensor:
    """Rows (lateral, up) of d h / d error-state, shape (..., 2, 21)"""
    batch = state.R.shape[:-2]
    Rc_t = state.R_c.transpose(-1, -2)
    v_imu = (state.R.transpose(-1, -2) @ state.v[..., None]).squeeze(-1)
    w = v_imu + torch.cross(omega_unbiased, state.p_c, dim=-1)

    H = state.R.new_zeros(*batch, 3, STATE_DIM)
    H[..., 3:6] = Rc_t @ state.R.transpose(-1, -2)
    H[..., 9:12] = Rc_t @ skew_torch(state.p_c)
    H[..., 15:18] = Rc_t @ skew_torch(w)
    H[..., 18:21] = Rc_t @ skew_torch(omega_unbiased)
    return H[..., 1:3, :]


def kalman_update(
    P: torch.Tensor,
    H: torch.Tensor,
    residual: torch.Tensor,
    N: torch.Tensor,
    joseph: bool = False,
    cond_limit: float = 1e12
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Generic linear Kalman correction

    Args:
        P: (..., n, n) covariance
        H: (..., m, n) measurement Jacobian
        residual: (..., m) measurement minus prediction
        N: (..., m) diagonal measurement noise
        joseph: Use (I-KH) P (I-KH)^T + K N K^T
        cond_limit: Skip the update where cond(H P H^T + N) exceeds this

    Returns:
        (dx (..., n), P' (..., n, n), skipped (...) bool)
    """
    Ht = H.transpose(-1, -2)
    Nm = torch.diag_embed(N)
    S = H @ P @ Ht + Nm
    skipped = torch.linalg.cond(S.detach()) > cond_limit
    eye_m = torch.eye(S.shape[-1], dtype=S.dtype)
    S_safe = torch.where(skipped[..., None, None], eye_m.expand_as(S), S)
    K = torch.linalg.solve(S_safe, H @ P).transpose(-1, -2)
    K = K * (~skipped)[..., None, None].to(K.dtype)

    dx = (K @ residual[..., None]).squeeze(-1)
    I_KH = torch.eye(P.shape[-1], dtype=P.dtype) - K @ H
    if joseph:
        P_new = I_KH @ P @ I_KH.transpose(-1, -2) + K @ Nm @ K.transpose(-1, -2)
    else:
        P_new = I_KH @ P
    P_new = 0.5 * (P_new + P_new.transpose(-1, -2))
    return dx, P_new, skipped


def retract(state: FilterState, dx: torch.Tensor) -> FilterState:
    """Apply an error-state correction on the group"""
    xi_R = dx[..., 0:3]
    dR = so3_exp_torch(xi_R)
    J = so3_left_jacobian_torch(xi_R)
    return FilterState(
        R=dR @ state.R,
        v=(dR @ state.v[..., None]).squeeze(-1) + (J @ dx[..., 3:6, None]).squeeze(-1),
        p=(dR @ state.p[..., None]).squeeze(-1) + (J @ dx[..., 6:9, None]).squeeze(-1),
        b_w=state.b_w + dx[..., 9:12],
        b_a=state.b_a + dx[..., 12:15],
        R_c=so3_exp_torch(dx[..., 15:18]) @ state.R_c,
        p_c=state.p_c + dx[..., 18:21],
    )


def zupt_update(
    state: FilterState,
    P: torch.Tensor,
    omega_unbiased: torch.Tensor,
    n: torch.Tensor,
    joseph: bool = False,
    cond_limit: float = 1e12
) -> Tuple[FilterState, torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Zero lateral / vertical body velocity update

    Returns:
        (state, covariance, innovation (v_lat, v_up) before the update, skipped flag)
    """
    innovation = body_velocity(state, omega_unbiased)[..., 1:3]
    H = measurement_jacobian(state, omega_unbiased)
    dx, P_new, skipped = kalman_update(P, H, -innovation, n, joseph=joseph, cond_limit=cond_limit)
    return retract(state, dx), P_new, innovation, skipped


def decode_meas_noise(y: NetOutput, sigma_lat2: float, sigma_up2: float):
    """N = diag(sigma_lat2 * 10^r1, sigma_up2 * 10^r2), returned as its diagonal"""
    if isinstance(y.r, torch.Tensor):
        base = torch.tensor([sigma_lat2, sigma_up2], dtype=y.r.dtype)
    else:
        base = np.array([sigma_lat2, sigma_up2])
    return base * 10.0 ** y.r


def reorthonormalize(R: torch.Tensor, tol: float) -> torch.Tensor:
    drift = ortho_error_torch(R)
    if not bool((drift > tol).any()):
        return R
    return torch.where((drift > tol)[..., None, None], renormalize_torch(R), R)


# ============================================================================
# PROVIDERS
# ============================================================================

class ConstantProvider:
    """Repeats one value for every step"""

    def __init__(self, value):
        self.value = value

    def __call__(self, k: int):
        return self.value


class SequenceProvider:
    """One value per step, optionally through an index map (step -> value slot)"""

    def __init__(self, values: Sequence, index: Optional[np.ndarray] = None):
        self.values = values
        self.index = np.asarray(index) if index is not None else None

    def __len__(self) -> int:
        return len(self.index) if self.index is not None else len(self.values)

    def __call__(self, k: int):
        return self.values[self.index[k]] if self.index is not None else self.values[k]


def _provider_len(provider) -> Optional[int]:
    try:
        return len(provider)
    except TypeError:
        return None


# ============================================================================
# FILTER
# ============================================================================

class InvariantEKF:
    """
    Sequential filter over an IMU stream

    Pose 0 is the initial state at the first sample time; pose k (k >= 1) results from
    propagating sample k-1 over t_k - t_{k-1} and then applying the velocity update.
    """

    def __init__(self, cfg: Optional[FilterConfig] = None):
        self.cfg = cfg or FilterConfig()
        self.g = gravity_vector(self.cfg)
        self.q = process_noise(self.cfg)
        self.gap_events: List[Tuple[int, float, float]] = []
        self.skipped_updates = 0

    def step(
        self,
        state: FilterState,
        P: torch.Tensor,
        u_raw: torch.Tensor,
        dt,
        corr: Correction,
        n: torch.Tensor,
        q: Optional[torch.Tensor] = None
    ) -> Tuple[FilterState, torch.Tensor, torch.Tensor]:
        """Correct, propagate, update. Works on single states and batches alike."""
        u = correct(u_raw, corr)
        state, P = propagate(state, P, u, dt, self.q if q is None else q, self.g)
        skipped = torch.zeros(state.R.shape[:-2], dtype=torch.bool)
        if self.cfg.updates_enabled:
            omega = u[..., 0:3] - state.b_w
            state, P, _, skipped = zupt_update(
                state, P, omega, n, joseph=self.cfg.joseph, cond_limit=self.cfg.cond_limit
            )
        state.R = reorthonormalize(state.R, self.cfg.ortho_tol)
        state.R_c = reorthonormalize(state.R_c, self.cfg.ortho_tol)
        return state, P, skipped

    def run_sequence(
        self,
        samples: ImuSequence,
        init: FilterState,
        cov0: torch.Tensor,
        noise_source,
        corr_source,
        q: Optional[torch.Tensor] = None,
        monitor: Optional[StepMonitor] = None
    ) -> Trajectory:
        """
        Filter a whole sequence

        Args:
            samples: Raw (uncorrected) IMU stream, strictly increasing timestamps
            init: State at samples.t[0]
            cov0: Initial covariance (21, 21)
            noise_source: Step index -> MeasNoise diagonal (2,)
            corr_source: Step index -> Correction
            q: Process noise diagonal (defaults to the config's)
            monitor: Called as monitor(k, state, P, skipped) after every step

        Returns:
            Trajectory with one pose per sample
        """
        n = len(samples)
        if n == 0:
            raise InvalidInputError("no IMU samples")
        if np.any(np.diff(samples.t) <= 0):
            raise InvalidInputError("IMU timestamps must be strictly increasing")
        for name, provider in (("noise", noise_source), ("correction", corr_source)):
            length = _provider_len(provider)
            if length is not None and length != n:
                raise InvalidInputError(f"{name} provider yields {length} values for {n} samples")

        self.gap_events = []
        self.skipped_updates = 0
        q = self.q if q is None else q
        u_all = torch.as_tensor(samples.stacked(), dtype=DTYPE)

        rotations = np.empty((n, 3, 3))
        positions = np.empty((n, 3))
        velocities = np.empty((n, 3))

        with torch.no_grad():
            state, P = init, cov0.to(DTYPE)
            rotations[0], positions[0], velocities[0] = state.R.numpy(), state.p.numpy(), state.v.numpy()
            for k in range(1, n):
                raw_dt = float(samples.t[k] - samples.t[k - 1])
                dt = raw_dt
                if raw_dt > self.cfg.gap_threshold:
                    dt = self.cfg.gap_threshold
                    self.gap_events.append((k, float(samples.t[k]), raw_dt))
                    logger.warning(
                        f"⚠️  IMU gap of {raw_dt:.3f} s before t={samples.t[k]:.3f} (step {k}), "
                        f"propagating {dt:.3f} s"
                    )
                corr = _as_torch_correction(corr_source(k - 1))
                noise = torch.as_tensor(noise_source(k - 1), dtype=DTYPE)
                state, P, skipped = self.step(state, P, u_all[k - 1], dt, corr, noise, q)
                if bool(skipped):
                    self.skipped_updates += 1
                    logger.warning(f"⚠️  Update skipped at step {k}: innovation covariance ill-conditioned")
                if monitor is not None:
                    monitor(k, state, P, bool(skipped))
                rotations[k], positions[k], velocities[k] = state.R.numpy(), state.p.numpy(), state.v.numpy()

        logger.info(
            f"✅ Filtered {n} samples ({len(self.gap_events)} gaps, {self.skipped_updates} skipped updates)"
        )
        return Trajectory(times=samples.t.copy(), rotations=rotations, positions=positions, velocities=velocities)

    def rollout(
        self,
        init: FilterState,
        cov0: torch.Tensor,
        u_raw: torch.Tensor,
        dt: torch.Tensor,
        corr: Correction,
        noise: torch.Tensor
    ) -> FilterState:
        """
        Differentiable batched rollout over windows

        Args:
            init: Batched start states (B, ...)
            cov0: (21, 21) or (B, 21, 21)
            u_raw: (B, T, 6) raw IMU windows
            dt: (B, T) step lengths
            corr: Correction with (B, 6) or (B, T, 6) fields
            noise: (B, 2) or (B, T, 2) measurement noise diagonals

        Returns:
            State after the last sample of each window
        """
        state = init
        P = cov0.expand(u_raw.shape[0], STATE_DIM, STATE_DIM)
        per_step_corr = corr.c_inv_diag.dim() == 3
        per_step_noise = noise.dim() == 3
        for k in range(u_raw.shape[1]):
            step_corr = Correction(c_inv_diag=corr.c_inv_diag[:, k], bias=corr.bias[:, k]) if per_step_corr else corr
            step_noise = noise[:, k] if per_step_noise else noise
            state, P, _ = self.step(state, P, u_raw[:, k], dt[:, k], step_corr, step_noise)
        return state


def _as_torch_correction(corr: Correction) -> Correction:
    return Correction(
        c_inv_diag=torch.as_tensor(corr.c_inv_diag, dtype=DTYPE),
        bias=torch.as_tensor(corr.bias, dtype=DTYPE),
    )


def static_providers(cfg: FilterConfig) -> Tuple[ConstantProvider, ConstantProvider]:
    """Identity correction and the configured constant N (the static-noise baseline)"""
    noise = decode_meas_noise(NetOutput.zeros(), cfg.sigma_lat2, cfg.sigma_up2)
    return ConstantProvider(noise), ConstantProvider(Correction.identity())
