"""
Rotation Toolkit - SO(3) maps for the filter, trainer and evaluator
Skew, exponential, logarithm, left Jacobian and re-orthonormalization in numpy and torch

Rotations are 3x3 matrices throughout. Quaternions only appear at file boundaries.
"""
import logging
from typing import Tuple

import numpy as np
import torch
from scipy.spatial.transform import Rotation as ScipyRotation

logger = logging.getLogger(__name__)

EPS_SMALL = 1e-8          # below this angle the Taylor series replaces sin/cos ratios
NEAR_PI = 1e-4            # within this of pi, the log uses the symmetric-part axis
ORTHO_TOL = 1e-9


# ============================================================================
# NUMPY
# ============================================================================

def skew(v: np.ndarray) -> np.ndarray:
    """
    Skew-symmetric matrix of a 3-vector (or a stack of them)

    Args:
        v: (..., 3)

    Returns:
        (..., 3, 3) with skew(v) @ w == cross(v, w)
    """
    v = np.asarray(v, dtype=float)
    m = np.zeros(v.shape[:-1] + (3, 3))
    m[..., 0, 1] = -v[..., 2]
    m[..., 0, 2] = v[..., 1]
    m[..., 1, 0] = v[..., 2]
    m[..., 1, 2] = -v[..., 0]
    m[..., 2, 0] = -v[..., 1]
    m[..., 2, 1] = v[..., 0]
    return m


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of skew for the antisymmetric part"""
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _exp_coefficients(theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """sin(t)/t and (1-cos(t))/t^2 with a second-order series below EPS_SMALL"""
    small = theta < EPS_SMALL
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    return a, b


def so3_exp(theta: np.ndarray) -> np.ndarray:
    """
    Rodrigues exponential: I + sin(t)/t [theta]x + (1-cos(t))/t^2 [theta]x^2

    Args:
        theta: rotation vector (..., 3), radians

    Returns:
        (..., 3, 3) rotation matrix
    """
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    a, b = _exp_coefficients(angle)
    k = skew(theta)
    eye = np.broadcast_to(np.eye(3), k.shape)
    R = eye + a[..., None, None] * k + b[..., None, None] * (k @ k)
    if np.any(angle > 10.0):
        R = renormalize(R)
    return R


def so3_log(R: np.ndarray) -> np.ndarray:
    """
    Logarithm of a rotation matrix, norm in [0, pi]

    Near pi the usual formula divides by sin(t) ~ 0, so the axis comes from the
    dominant eigenvector of the symmetric part (R + R^T) / 2 instead.
    """
    R = np.asarray(R, dtype=float)
    Rt = np.swapaxes(R, -1, -2)
    w = vee(R - Rt) / 2.0
    cos_t = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    sin_t = np.linalg.norm(w, axis=-1)
    angle = np.arctan2(sin_t, cos_t)

    small = angle < EPS_SMALL
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(small, 1.0, angle / np.where(small, 1.0, sin_t))
        out = scale[..., None] * w

    near_pi = angle > np.pi - NEAR_PI
    if np.any(near_pi):
        flat_R = R.reshape(-1, 3, 3)
        flat_out = out.reshape(-1, 3)
        flat_w = w.reshape(-1, 3)
        flat_angle = np.broadcast_to(angle, near_pi.shape).reshape(-1)
        for i in np.flatnonzero(near_pi.reshape(-1)):
            sym = (flat_R[i] + flat_R[i].T) / 2.0
            eigvals, eigvecs = np.linalg.eigh(sym)
            axis = eigvecs[:, np.argmax(eigvals)]
            if np.dot(axis, flat_w[i]) < 0:
                axis = -axis
            flat_out[i] = flat_angle[i] * axis
        out = flat_out.reshape(out.shape)
    return out


def so3_left_jacobian(theta: np.ndarray) -> np.ndarray:
    """J(theta) = I + (1-cos t)/t^2 [theta]x + (t - sin t)/t^3 [theta]x^2"""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    small = angle < EPS_SMALL
    safe = np.where(small, 1.0, angle)
    b = np.where(small, 0.5 - angle ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    c = np.where(small, 1.0 / 6.0 - angle ** 2 / 120.0, (safe - np.sin(safe)) / safe ** 3)
    k = skew(theta)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + b[..., None, None] * k + c[..., None, None] * (k @ k)


def renormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix via SVD projection"""
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.zeros(np.shape(R))
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    return U @ D @ Vt


def ortho_error(R: np.ndarray) -> float:
    """max |R^T R - I| over a rotation or a stack of rotations"""
    R = np.asarray(R, dtype=float)
    return float(np.max(np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3))))


def from_rpy(roll, pitch, yaw) -> np.ndarray:
    """Intrinsic ZYX: Rz(yaw) @ Ry(pitch) @ Rx(roll)"""
    roll, pitch, yaw = (np.asarray(x, dtype=float) for x in (roll, pitch, yaw))
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.empty(np.broadcast(roll, pitch, yaw).shape + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def to_quat_wxyz(R: np.ndarray) -> np.ndarray:
    """Hamilton quaternion, scalar first"""
    xyzw = ScipyRotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    return np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)


def from_quat_wxyz(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    xyzw = np.concatenate([q[..., 1:], q[..., :1]], axis=-1)
    return ScipyRotation.from_quat(xyzw).as_matrix()


# ============================================================================
# TORCH (batched, differentiable)
# ============================================================================

def skew_torch(v: torch.Tensor) -> torch.Tensor:
    """(..., 3) -> (..., 3, 3)"""
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)


def _safe_angle(theta: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    # sqrt has an infinite gradient at 0, so the norm is taken on a padded square
    sq = (theta * theta).sum(-1)
    small = sq < EPS_SMALL ** 2
    safe_sq = torch.where(small, torch.ones_like(sq), sq)
    angle = torch.sqrt(safe_sq)
    return angle, small, sq


def so3_exp_torch(theta: torch.Tensor) -> torch.Tensor:
    angle, small, sq = _safe_angle(theta)
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(angle) / angle)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(angle)) / sq.where(~small, torch.ones_like(sq)))
    k = skew_torch(theta)
    eye = torch.eye(3, dtype=theta.dtype, device=theta.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def so3_left_jacobian_torch(theta: torch.Tensor) -> torch.Tensor:
    angle, small, sq = _safe_angle(theta)
    safe_sq = sq.where(~small, torch.ones_like(sq))
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(angle)) / safe_sq)
    c = torch.where(small, 1.0 / 6.0 - sq / 120.0, (angle - torch.sin(angle)) / (safe_sq * angle))
    k = skew_torch(theta)
    eye = torch.eye(3, dtype=theta.dtype, device=theta.device).expand(k.shape)
    return eye + b[..., None, None] * k + c[..., None, None] * (k @ k)


def so3_log_torch(R: torch.Tensor) -> torch.Tensor:
    """
    Differentiable log for rotations away from pi

    The loss only takes logs of window increments, which stay far from pi, so the
    near-pi axis branch of the numpy version is not replicated here.
    """
    w = torch.stack([
        R[..., 2, 1] - R[..., 1, 2],
        R[..., 0, 2] - R[..., 2, 0],
        R[..., 1, 0] - R[..., 0, 1],
    ], dim=-1) / 2.0
    trace = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    cos_t = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0)
    sin_sq = (w * w).sum(-1)
    small = sin_sq < EPS_SMALL ** 2
    sin_t = torch.sqrt(torch.where(small, torch.ones_like(sin_sq), sin_sq))
    angle = torch.atan2(sin_t, cos_t)
    scale = torch.where(small, torch.ones_like(angle), angle / sin_t)
    return scale[..., None] * w


def renormalize_torch(R: torch.Tensor) -> torch.Tensor:
    """One Newton-Schulz step toward the nearest rotation: R (3I - R^T R) / 2"""
    eye = torch.eye(3, dtype=R.dtype, device=R.device)
    return R @ (1.5 * eye - 0.5 * R.transpose(-1, -2) @ R)


def ortho_error_torch(R: torch.Tensor) -> torch.Tensor:
    """Per-rotation max |R^T R - I|"""
    eye = torch.eye(3, dtype=R.dtype, device=R.device)
    return (R.transpose(-1, -2) @ R - eye).abs().amax(dim=(-1, -2))
