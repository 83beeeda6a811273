#!/usr/bin/env python3
"""
Test Invariant EKF
Verifies strapdown propagation, the velocity pseudo-measurement update and whole-sequence filtering
"""
import numpy as np
import pytest
import torch

from datasets import GRAVITY, align_truth, inject_gap, synthesize
from evalmetrics import evaluate
from geom3d import so3_exp
from imu_model import Correction, ImuSequence, NetOutput, corrupt
from inekf import (
    DTYPE,
    ConstantProvider,
    FilterState,
    InvariantEKF,
    SequenceProvider,
    body_velocity,
    decode_meas_noise,
    default_covariance,
    kalman_update,
    process_noise,
    propagate,
    static_providers,
    zupt_update,
)
from nav_errors import InvalidInputError
from nav_models import CorruptionSpec, FilterConfig, SynthSpec


def t(values) -> torch.Tensor:
    return torch.as_tensor(values, dtype=DTYPE)


def run_static(imu, truth, cfg: FilterConfig = None, monitor=None):
    cfg = cfg or FilterConfig()
    ekf = InvariantEKF(cfg)
    noise, corr = static_providers(cfg)
    est = ekf.run_sequence(imu, FilterState.from_truth(truth, 0), default_covariance(cfg), noise, corr, monitor=monitor)
    return ekf, est


# ============================================================================
# PROPAGATION
# ============================================================================

def test_stationary_state_is_an_equilibrium():
    """Test a level, resting IMU reading exactly gravity stays put"""
    cfg = FilterConfig()
    state, P = FilterState.identity(), default_covariance(cfg)
    u = t([0.0, 0.0, 0.0, *GRAVITY])
    for _ in range(100):
        state, P = propagate(state, P, u, 0.01, process_noise(cfg), t(GRAVITY))
    assert torch.equal(state.R, torch.eye(3, dtype=DTYPE))
    assert torch.equal(state.v, torch.zeros(3, dtype=DTYPE))
    assert torch.equal(state.p, torch.zeros(3, dtype=DTYPE))


def test_constant_acceleration_matches_euler_sum():
    """Test p_n = alpha dt^2 n (n - 1) / 2 (position uses the velocity before the step)"""
    cfg = FilterConfig()
    alpha, dt, n = 0.5, 0.01, 200
    state, P = FilterState.identity(), default_covariance(cfg)
    u = t([0.0, 0.0, 0.0, alpha, 0.0, GRAVITY[2]])
    for _ in range(n):
        state, P = propagate(state, P, u, dt, process_noise(cfg), t(GRAVITY))
    assert float(state.p[0]) == pytest.approx(alpha * dt ** 2 * n * (n - 1) / 2, rel=1e-12)
    assert float(state.v[0]) == pytest.approx(alpha * dt * n, rel=1e-12)


def test_propagate_rejects_bad_inputs():
    cfg = FilterConfig()
    state, P, q, g = FilterState.identity(), default_covariance(cfg), process_noise(cfg), t(GRAVITY)
    u = t([0.0, 0.0, 0.0, *GRAVITY])
    with pytest.raises(InvalidInputError):
        propagate(state, P, u, 0.0, q, g)
    with pytest.raises(InvalidInputError):
        propagate(state, P, u, -0.01, q, g)
    with pytest.raises(InvalidInputError):
        propagate(state, P, t([np.nan, 0.0, 0.0, 0.0, 0.0, 9.8]), 0.01, q, g)


def test_propagated_covariance_is_symmetric_and_grows():
    cfg = FilterConfig(estimate_bias=True)
    state = FilterState.identity()
    state.v = t([3.0, 0.0, 0.0])
    P0 = default_covariance(cfg)
    _, P = propagate(state, P0, t([0.0, 0.0, 0.1, 0.0, 0.0, 9.8]), 0.01, process_noise(cfg), t(GRAVITY))
    assert torch.equal(P, P.transpose(-1, -2))
    assert float(torch.trace(P)) > float(torch.trace(P0))


def test_default_covariance_zeroes_bias_blocks_without_bias_estimation():
    P = default_covariance(FilterConfig(estimate_bias=False))
    assert torch.all(torch.diagonal(P)[9:15] == 0)
    P = default_covariance(FilterConfig(estimate_bias=True))
    assert torch.all(torch.diagonal(P)[9:15] > 0)


# ============================================================================
# PSEUDO-MEASUREMENT
# ============================================================================

def test_body_velocity_known_values():
    state = FilterState.identity()
    state.v = t([1.0, 0.0, 0.0])
    assert torch.allclose(body_velocity(state, t([0.0, 0.0, 0.0])), t([1.0, 0.0, 0.0]))

    state.R = t(so3_exp([0.0, 0.0, np.pi / 2]))
    state.v = t([0.0, 1.0, 0.0])
    assert torch.allclose(body_velocity(state, t([0.0, 0.0, 0.0])), t([1.0, 0.0, 0.0]), atol=1e-15)

    lever = FilterState.identity()
    lever.p_c = t([0.0, 1.0, 0.0])
    assert torch.allclose(body_velocity(lever, t([0.0, 0.0, 1.0])), t([-1.0, 0.0, 0.0]))


def test_body_velocity_matches_numpy_oracle():
    rng = np.random.default_rng(21)
    for _ in range(50):
        R, R_c = so3_exp(rng.normal(size=3)), so3_exp(0.1 * rng.normal(size=3))
        v, p_c, w = rng.normal(size=(3, 3))
        state = FilterState.identity()
        state.R, state.v, state.R_c, state.p_c = t(R), t(v), t(R_c), t(p_c)
        expected = R_c.T @ (R.T @ v + np.cross(w, p_c))
        np.testing.assert_allclose(body_velocity(state, t(w)).numpy(), expected, atol=1e-13)


def sliding_state() -> FilterState:
    state = FilterState.identity()
    state.v = t([2.0, 0.3, -0.1])
    return state


def test_zupt_with_zero_innovation_leaves_state():
    cfg = FilterConfig()
    state = FilterState.identity()
    state.v = t([5.0, 0.0, 0.0])
    P = default_covariance(cfg)
    new, P_new, innovation, skipped = zupt_update(state, P, t([0.0, 0.0, 0.0]), t([0.01, 0.01]))
    assert torch.equal(innovation, t([0.0, 0.0]))
    assert torch.allclose(new.v, state.v, atol=1e-15)
    assert torch.allclose(new.R, state.R, atol=1e-15)
    assert not bool(skipped)
    assert float(torch.trace(P_new)) < float(torch.trace(P))


def test_zupt_trusts_small_noise_and_ignores_huge_noise():
    cfg = FilterConfig()
    P = default_covariance(cfg)
    omega = t([0.0, 0.0, 0.0])

    firm, _, _, _ = zupt_update(sliding_state(), P, omega, t([1e-8, 1e-8]))
    loose, _, _, _ = zupt_update(sliding_state(), P, omega, t([1e6, 1e6]))
    ignored, _, _, _ = zupt_update(sliding_state(), P, omega, t([1e12, 1e12]))

    assert float(torch.abs(body_velocity(firm, omega)[1:]).max()) < 1e-5
    assert float(torch.abs(ignored.v - sliding_state().v).max()) < 1e-9

    shift_loose = float(torch.abs(loose.v - sliding_state().v).max())
    shift_ignored = float(torch.abs(ignored.v - sliding_state().v).max())
    assert shift_loose >= 1e3 * shift_ignored


def test_kalman_update_matches_scalar_oracle():
    """Test the generic update against the closed-form 1-D Kalman gain, both covariance forms"""
    rng = np.random.default_rng(8)
    for _ in range(100):
        p, h, n, r = rng.uniform(0.1, 10.0), rng.uniform(-3.0, 3.0), rng.uniform(0.01, 5.0), rng.normal()
        s = h * p * h + n
        k = p * h / s
        for joseph in (False, True):
            dx, P_new, skipped = kalman_update(t([[p]]), t([[h]]), t([r]), t([n]), joseph=joseph)
            assert float(dx[0]) == pytest.approx(k * r, rel=1e-12, abs=1e-15)
            assert float(P_new[0, 0]) == pytest.approx(p - k * h * p, rel=1e-10)
            assert not bool(skipped)


def test_joseph_form_agrees_with_standard_form():
    cfg = FilterConfig(estimate_bias=True)
    P = default_covariance(cfg)
    omega = t([0.01, -0.02, 0.1])
    _, P_std, _, _ = zupt_update(sliding_state(), P, omega, t([0.01, 0.02]), joseph=False)
    _, P_jos, _, _ = zupt_update(sliding_state(), P, omega, t([0.01, 0.02]), joseph=True)
    torch.testing.assert_close(P_std, P_jos, rtol=1e-9, atol=1e-15)


def test_ill_conditioned_update_is_skipped():
    P = torch.zeros(21, 21, dtype=DTYPE)
    P[4, 4] = 1e8
    state = sliding_state()
    new, P_new, _, skipped = zupt_update(state, P, t([0.0, 0.0, 0.0]), t([1e-6, 1e-6]), cond_limit=1e6)
    assert bool(skipped)
    torch.testing.assert_close(new.v, state.v, rtol=0, atol=1e-15)
    torch.testing.assert_close(P_new, P, rtol=0, atol=1e-15)


def test_decode_meas_noise():
    np.testing.assert_allclose(decode_meas_noise(NetOutput.zeros(), 0.01, 0.02), [0.01, 0.02])
    y = np.zeros(14)
    y[12], y[13] = 1.0, -1.0
    np.testing.assert_allclose(decode_meas_noise(NetOutput.from_vector(y), 0.01, 0.02), [0.1, 0.002])

    rng = np.random.default_rng(2)
    batch = torch.as_tensor(rng.uniform(-1, 1, size=(5, 14)), dtype=DTYPE)
    noise = decode_meas_noise(NetOutput.from_vector(batch), 0.01, 0.01)
    assert noise.shape == (5, 2)
    assert torch.all(noise > 0)


# ============================================================================
# SEQUENCE FILTERING
# ============================================================================

def test_noise_free_circle_is_reproduced():
    """Test filtering clean synthetic IMU recovers the circle to 1e-6 m"""
    imu, truth = synthesize(SynthSpec(kind="circle", duration=60.0, speed=1.0, yaw_rate=0.1))
    for updates in (True, False):
        ekf, est = run_static(imu, truth, FilterConfig(updates_enabled=updates))
        assert len(est) == len(imu)
        assert np.max(np.abs(est.positions - truth.positions[:-1])) <= 1e-6
        assert ekf.gap_events == []


def test_run_sequence_is_deterministic():
    imu, truth = synthesize(SynthSpec(kind="figure-eight", duration=5.0))
    noisy = corrupt(imu, CorruptionSpec.kitti_lowcost(1))
    _, a = run_static(noisy, truth)
    _, b = run_static(noisy, truth)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.rotations, b.rotations)


def test_run_sequence_rejects_bad_streams():
    cfg = FilterConfig()
    ekf = InvariantEKF(cfg)
    noise, corr = static_providers(cfg)
    init, P0 = FilterState.identity(), default_covariance(cfg)

    with pytest.raises(InvalidInputError):
        ekf.run_sequence(ImuSequence.empty(), init, P0, noise, corr)

    unsorted = ImuSequence(t=[0.0, 0.02, 0.01], gyro=np.zeros((3, 3)), accel=np.tile(GRAVITY, (3, 1)))
    with pytest.raises(InvalidInputError):
        ekf.run_sequence(unsorted, init, P0, noise, corr)

    imu, _ = synthesize(SynthSpec(kind="straight", duration=1.0))
    short_noise = SequenceProvider([noise(0)] * (len(imu) - 1))
    with pytest.raises(InvalidInputError):
        ekf.run_sequence(imu, init, P0, short_noise, corr)


def test_sequence_providers_are_consulted_per_step():
    imu, truth = synthesize(SynthSpec(kind="straight", duration=1.0))
    cfg = FilterConfig()
    seen = []

    class Recording(SequenceProvider):
        def __call__(self, k):
            seen.append(k)
            return super().__call__(k)

    corr = Recording([Correction.identity()] * len(imu))
    noise = ConstantProvider(decode_meas_noise(NetOutput.zeros(), cfg.sigma_lat2, cfg.sigma_up2))
    InvariantEKF(cfg).run_sequence(imu, FilterState.from_truth(truth), default_covariance(cfg), noise, corr)
    assert seen == list(range(len(imu) - 1))


def test_gap_is_capped_and_recorded():
    imu, truth = synthesize(SynthSpec(kind="circle", duration=10.0))
    gapped = inject_gap(imu, 4.0, 1.0)
    ekf, est = run_static(gapped, truth)
    assert len(est) == len(gapped)
    assert len(ekf.gap_events) == 1
    k, t_k, raw_dt = ekf.gap_events[0]
    assert t_k == pytest.approx(5.0)
    assert raw_dt == pytest.approx(1.01)
    assert np.all(np.isfinite(est.positions))


@pytest.mark.slow
def test_covariance_health_across_seeds():
    """Test symmetry, PSD and orthonormality on every step for 20 corrupted streams"""
    imu, truth = synthesize(SynthSpec(kind="figure-eight", duration=30.0, speed=5.0))
    for seed in range(20):
        worst = {"asym": 0.0, "eig": 0.0, "ortho": 0.0}

        def monitor(k, state, P, skipped):
            worst["asym"] = max(worst["asym"], float(torch.abs(P - P.transpose(-1, -2)).max()))
            eig = torch.linalg.eigvalsh(P)
            worst["eig"] = min(worst["eig"], float(eig.min() / max(1.0, float(eig.max()))))
            RtR = state.R.transpose(-1, -2) @ state.R
            worst["ortho"] = max(worst["ortho"], float(torch.abs(RtR - torch.eye(3, dtype=DTYPE)).max()))

        run_static(corrupt(imu, CorruptionSpec.kitti_lowcost(seed)), truth, monitor=monitor)
        assert worst["asym"] <= 1e-12
        assert worst["eig"] >= -1e-9
        assert worst["ortho"] <= 1e-9


@pytest.mark.slow
def test_velocity_constraint_beats_open_loop():
    """Test the final position error with updates on is at most half the open-loop one, median over 20 streams"""
    imu, truth = synthesize(SynthSpec(kind="figure-eight", duration=120.0, speed=5.0))
    final_truth = truth.positions[len(imu) - 1]
    ratios = []
    for seed in range(20):
        noisy = corrupt(imu, CorruptionSpec.kitti_lowcost(seed))
        _, constrained = run_static(noisy, truth, FilterConfig())
        _, open_loop = run_static(noisy, truth, FilterConfig(updates_enabled=False))
        err_c = np.linalg.norm(constrained.positions[-1] - final_truth)
        err_o = np.linalg.norm(open_loop.positions[-1] - final_truth)
        ratios.append(err_c / err_o)
    assert np.median(ratios) <= 0.5


@pytest.mark.slow
def test_two_second_gap_degrades_gracefully():
    imu, truth = synthesize(SynthSpec(kind="circle", duration=60.0, speed=10.0, yaw_rate=0.05))
    noisy = corrupt(imu, CorruptionSpec.kitti_lowcost(11))
    _, base = run_static(noisy, truth)
    ekf, gapped = run_static(inject_gap(noisy, 30.0, 2.0), truth)

    assert len(ekf.gap_events) == 1
    assert np.all(np.isfinite(gapped.positions))
    base_rte = evaluate(base, align_truth(truth, base.times)).rte_percent
    gap_rte = evaluate(gapped, align_truth(truth, gapped.times)).rte_percent
    assert gap_rte < 5.0 * base_rte


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
