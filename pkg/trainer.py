"""
SNN Trainer - End-to-end training through the differentiable filter
Windows -> SNN head -> decoded correction and noise -> batched InEKF rollout -> Huber on increments

Learn which corrections actually shrink the drift, window by window
"""
import copy
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from datasets import Trajectory
from geom3d import so3_log, so3_log_torch
from imu_model import ImuSequence, NetOutput, decode_correction
from inekf import DTYPE, FilterState, InvariantEKF, decode_meas_noise, default_covariance
from nav_errors import InvalidInputError, NumericFailureError
from nav_models import FilterConfig, TrainConfig, TrainLogRecord
from snn_core import SpikingNavNet, save_checkpoint, set_surrogate_mode

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# ============================================================================
# WINDOWS
# ============================================================================

@dataclass
class SupervisionTarget:
    """Ground-truth increments over one window: world displacement, velocity change, rotation log"""
    dp: np.ndarray
    dv: np.ndarray
    dR: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.dp, self.dv, self.dR])


@dataclass
class TrainingWindow:
    """N IMU samples with their dt, the truth state at the window start and the target"""
    window_id: str
    imu: np.ndarray          # (N, 6)
    dt: np.ndarray           # (N,)
    start_R: np.ndarray
    start_v: np.ndarray
    start_p: np.ndarray
    target: SupervisionTarget


def build_windows(
    seq: ImuSequence,
    truth: Trajectory,
    window_n: int,
    stride: Optional[int] = None,
    name: str = "seq"
) -> List[TrainingWindow]:
    """
    Cut a sequence into supervised windows

    The network reads window [i, i + N) and the filter rolls over the same samples. At
    inference the outputs are applied to the N samples after the window ends. Integrating [i, i + N)
    carries truth row i to row i + N, so the truth must share the IMU timestamps (plus
    possibly one trailing row).

    Args:
        seq: IMU stream the network and filter will see
        truth: Ground truth on the same time base
        window_n: Samples per window
        stride: Step between window starts (defaults to window_n // 2)
        name: Prefix for window ids

    Returns:
        List of TrainingWindow (empty when the sequence is shorter than one window)
    """
    stride = stride if stride is not None else max(1, window_n // 2)
    n = len(seq)
    if n < window_n or len(truth) < window_n + 1:
        return []
    shared = min(n, len(truth))
    if np.max(np.abs(truth.times[:shared] - seq.t[:shared])) > 1e-6:
        raise InvalidInputError(f"{name}: truth is not time-aligned with the IMU stream")

    stacked = seq.stacked()
    windows = []
    for i in range(0, min(n - window_n, len(truth) - 1 - window_n) + 1, stride):
        j = i + window_n
        R_i, R_j = truth.rotations[i], truth.rotations[j]
        windows.append(TrainingWindow(
            window_id=f"{name}:{i}",
            imu=stacked[i:j],
            dt=np.diff(truth.times[i:j + 1]),
            start_R=R_i,
            start_v=truth.velocities[i],
            start_p=truth.positions[i],
            target=SupervisionTarget(
                dp=truth.positions[j] - truth.positions[i],
                dv=truth.velocities[j] - truth.velocities[i],
                dR=so3_log(R_i.T @ R_j),
            ),
        ))
    return windows


# ============================================================================
# LOSS AND SCHEDULE
# ============================================================================

def huber(residual, delta: float):
    """1/2 r^2 for |r| <= delta, delta |r| - 1/2 delta^2 beyond"""
    if isinstance(residual, torch.Tensor):
        abs_r = residual.abs()
        return torch.where(abs_r <= delta, 0.5 * residual ** 2, delta * abs_r - 0.5 * delta ** 2)
    abs_r = np.abs(residual)
    return np.where(abs_r <= delta, 0.5 * np.square(residual), delta * abs_r - 0.5 * delta ** 2)


def lr_schedule(step: int, base_lr: float, restart_period: int) -> float:
    """Cosine annealing with warm restarts, fixed period"""
    if restart_period < 1:
        raise InvalidInputError("restart_period must be >= 1")
    phase = (step % restart_period) / restart_period
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * phase))


@dataclass
class WindowBatch:
    ids: List[str]
    imu: torch.Tensor        # (B, N, 6) float64
    dt: torch.Tensor         # (B, N)
    start: FilterState
    target: torch.Tensor     # (B, 9)


def _start_state(window: TrainingWindow) -> FilterState:
    state = FilterState.identity()
    state.R = torch.as_tensor(window.start_R, dtype=DTYPE)
    state.v = torch.as_tensor(window.start_v, dtype=DTYPE)
    state.p = torch.as_tensor(window.start_p, dtype=DTYPE)
    return state


def collate(windows: Sequence[TrainingWindow]) -> WindowBatch:
    start = FilterState.stack([_start_state(w) for w in windows])
    return WindowBatch(
        ids=[w.window_id for w in windows],
        imu=torch.as_tensor(np.stack([w.imu for w in windows]), dtype=DTYPE),
        dt=torch.as_tensor(np.stack([w.dt for w in windows]), dtype=DTYPE),
        start=start,
        target=torch.as_tensor(np.stack([w.target.vector() for w in windows]), dtype=DTYPE),
    )


def window_loss(
    net: SpikingNavNet,
    ekf: InvariantEKF,
    batch: WindowBatch,
    huber_delta: float,
    steps: Optional[int] = None
) -> torch.Tensor:
    """
    Mean over the batch of the summed Huber loss on (dp, dv, dR)

    Args:
        steps: Roll the filter over only the first `steps` samples (gradient checks)
    """
    net_dtype = next(net.parameters()).dtype
    y = net(batch.imu.to(net_dtype)).to(DTYPE)
    head = NetOutput.from_vector(y)
    corr = decode_correction(head, net.cfg.beta_s)
    noise = decode_meas_noise(head, ekf.cfg.sigma_lat2, ekf.cfg.sigma_up2)

    k = batch.imu.shape[1] if steps is None else steps
    final = ekf.rollout(
        batch.start, default_covariance(ekf.cfg), batch.imu[:, :k], batch.dt[:, :k], corr, noise
    )
    dp = final.p - batch.start.p
    dv = final.v - batch.start.v
    dR = so3_log_torch(batch.start.R.transpose(-1, -2) @ final.R)
    residual = torch.cat([dp, dv, dR], dim=-1) - batch.target
    return huber(residual, huber_delta).sum(-1).mean()


# ============================================================================
# EPOCHS
# ============================================================================

def make_optimizer(net: SpikingNavNet, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        net.parameters(), lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=cfg.weight_decay
    )


def _grad_norm(net: SpikingNavNet) -> float:
    norms = [p.grad.detach().norm() for p in net.parameters() if p.grad is not None]
    return float(torch.norm(torch.stack(norms))) if norms else 0.0


def train_epoch(
    net: SpikingNavNet,
    optimizer: torch.optim.Optimizer,
    windows: Sequence[TrainingWindow],
    ekf: InvariantEKF,
    cfg: TrainConfig,
    epoch: int = 0,
    lr: Optional[float] = None
) -> Tuple[float, float]:
    """
    One shuffled pass with an optimizer step per batch

    Args:
        net: Network being trained (updated in place)
        optimizer: AdamW over net's parameters
        windows: Training windows
        ekf: Filter whose config drives the rollout
        cfg: Training config (seed, batch size, Huber delta, schedule)
        epoch: Epoch index, for the schedule and the shuffle seed
        lr: Learning rate override for this epoch (defaults to the cosine schedule)

    Returns:
        (mean window loss, last batch gradient norm)
    """
    if not windows:
        raise InvalidInputError("no training windows")
    lr = lr_schedule(epoch, cfg.lr, cfg.restart_period) if lr is None else lr
    for group in optimizer.param_groups:
        group["lr"] = lr

    generator = torch.Generator().manual_seed(cfg.seed * 100003 + epoch)
    order = torch.randperm(len(windows), generator=generator).tolist()
    net.train()

    total, count, grad_norm = 0.0, 0, 0.0
    for start in range(0, len(order), cfg.batch_size):
        chunk = [windows[i] for i in order[start:start + cfg.batch_size]]
        batch = collate(chunk)
        optimizer.zero_grad()
        loss = window_loss(net, ekf, batch, cfg.huber_delta)
        if not torch.isfinite(loss):
            raise NumericFailureError(
                "non-finite training loss", epoch=epoch, grad_norm=grad_norm, windows=",".join(batch.ids)
            )
        loss.backward()
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
        grad_norm = _grad_norm(net)
        if not math.isfinite(grad_norm):
            raise NumericFailureError(
                "non-finite gradient", epoch=epoch, grad_norm=grad_norm, windows=",".join(batch.ids)
            )
        optimizer.step()
        total += float(loss) * len(chunk)
        count += len(chunk)
    return total / count, grad_norm


def validate(net: SpikingNavNet, windows: Sequence[TrainingWindow], ekf: InvariantEKF, cfg: TrainConfig) -> float:
    net.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(windows), cfg.batch_size):
            chunk = windows[start:start + cfg.batch_size]
            total += float(window_loss(net, ekf, collate(chunk), cfg.huber_delta)) * len(chunk)
    return total / len(windows)


class Trainer:
    """
    Runs epochs, writes the JSON-lines log and periodic checkpoints

    Checkpoints: epoch_NNNN.ckpt every K epochs, last.ckpt, and best.ckpt
    (lowest validation loss, or training loss when there is no validation set).
    """

    def __init__(self, net: SpikingNavNet, filter_cfg: FilterConfig, cfg: TrainConfig, output_dir: Path):
        self.net = net
        self.cfg = cfg
        self.ekf = InvariantEKF(filter_cfg)
        self.output_dir = Path(output_dir)
        self.log_file = self.output_dir / "train_log.jsonl"
        self.optimizer = make_optimizer(net, cfg)
        self.history: List[TrainLogRecord] = []

    def _log(self, record: TrainLogRecord):
        self.history.append(record)
        with open(self.log_file, "a") as f:
            f.write(record.model_dump_json() + "\n")

    def fit(
        self,
        train_windows: Sequence[TrainingWindow],
        val_windows: Sequence[TrainingWindow] = ()
    ) -> List[TrainLogRecord]:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.log_file.write_text("")
        torch.manual_seed(self.cfg.seed)
        logger.info(
            f"🚀 Training on {len(train_windows)} windows ({len(val_windows)} validation) "
            f"for {self.cfg.epochs} epochs"
        )

        best = math.inf
        for epoch in range(self.cfg.epochs):
            started = time.perf_counter()
            lr = lr_schedule(epoch, self.cfg.lr, self.cfg.restart_period)
            try:
                loss, grad_norm = train_epoch(self.net, self.optimizer, train_windows, self.ekf, self.cfg, epoch)
            except NumericFailureError:
                logger.error(f"❌ Epoch {epoch}: non-finite loss, aborting")
                save_checkpoint(self.net, self.output_dir / "failed.ckpt", meta={"epoch": epoch})
                raise
            val_loss = validate(self.net, val_windows, self.ekf, self.cfg) if val_windows else None
            record = TrainLogRecord(
                epoch=epoch, loss=loss, val_loss=val_loss, lr=lr, grad_norm=grad_norm,
                wall_ms=(time.perf_counter() - started) * 1000.0,
            )
            self._log(record)
            logger.info(
                f"Epoch {epoch:4d}: loss={loss:.6g}"
                + (f" val={val_loss:.6g}" if val_loss is not None else "")
                + f" lr={lr:.3g} |g|={grad_norm:.3g}"
            )

            score = val_loss if val_loss is not None else loss
            if score < best:
                best = score
                save_checkpoint(self.net, self.output_dir / "best.ckpt", meta={"epoch": epoch, "score": score})
            if (epoch + 1) % self.cfg.checkpoint_every == 0:
                save_checkpoint(self.net, self.output_dir / f"epoch_{epoch + 1:04d}.ckpt", meta={"epoch": epoch})

        save_checkpoint(self.net, self.output_dir / "last.ckpt", meta={"epoch": self.cfg.epochs - 1})
        logger.info(f"✅ Training complete, best score {best:.6g}")
        return self.history


# ============================================================================
# CHECKS
# ============================================================================

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    n_checked: int


def gradient_check(
    net: SpikingNavNet,
    windows: Sequence[TrainingWindow],
    filter_cfg: FilterConfig,
    huber_delta: float = 4e-4,
    steps: int = 2,
    eps: float = 1e-4,
    max_entries: int = 8,
    abs_floor: float = 1e-6,
    seed: int = 0
) -> GradCheckReport:
    """
    Compare autograd against central finite differences on the smooth network

    Runs on a float64 eval-mode copy with every spike node in smooth mode, so the forward
    is differentiable and the surrogate backward is its exact derivative.

    Args:
        net: Network to check (left untouched)
        windows: A small batch of training windows
        filter_cfg: Filter settings for the rollout
        huber_delta: Loss transition point
        steps: Filter steps rolled out per window
        eps: Finite-difference step
        max_entries: Entries sampled per parameter tensor
        abs_floor: Denominator floor for the relative error
        seed: Entry sampling seed

    Returns:
        GradCheckReport with the worst relative error over all sampled entries
    """
    smooth_net = copy.deepcopy(net).double()
    smooth_net.eval()
    set_surrogate_mode(smooth_net, spiking=False)
    ekf = InvariantEKF(filter_cfg)
    batch = collate(windows)

    def loss_value() -> float:
        with torch.no_grad():
            return float(window_loss(smooth_net, ekf, batch, huber_delta, steps=steps))

    smooth_net.zero_grad()
    window_loss(smooth_net, ekf, batch, huber_delta, steps=steps).backward()

    generator = torch.Generator().manual_seed(seed)
    worst, worst_name, checked = 0.0, "", 0
    for name, param in smooth_net.named_parameters():
        flat = param.data.view(-1)
        analytic = param.grad.view(-1)
        picks = torch.randperm(flat.numel(), generator=generator)[:max_entries].tolist()
        for idx in picks:
            original = float(flat[idx])
            flat[idx] = original + eps
            plus = loss_value()
            flat[idx] = original - eps
            minus = loss_value()
            flat[idx] = original
            numeric = (plus - minus) / (2 * eps)
            a = float(analytic[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            checked += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}[{idx}]"
    logger.info(f"Gradient check: {checked} entries, worst relative error {worst:.2e} at {worst_name or '-'}")
    return GradCheckReport(max_rel_error=worst, worst_parameter=worst_name, n_checked=checked)


def adamw_reference_step(
    w: float, g: float, m: float, v: float, step: int, lr: float, weight_decay: float
) -> Tuple[float, float, float]:
    """
    Closed-form decoupled-weight-decay Adam update for one scalar

    Returns:
        (w, m, v) after step `step` (1-based)
    """
    beta1, beta2 = ADAM_BETAS
    w = w * (1.0 - lr * weight_decay)
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    w = w - lr * m_hat / (math.sqrt(v_hat) + ADAM_EPS)
    return w, m, v
