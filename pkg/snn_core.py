"""
Spiking Network - LIF neurons, arctan surrogate gradient and a spiking inverted transformer
Maps a window of raw IMU samples to the 14-dim head (scale, bias, measurement-noise exponents)

Shapes: spike tensors are (ts, B, channel, feature); each of the 6 IMU channels is one token.
"""
import json
import logging
import math
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from imu_model import Correction, ImuSequence, NetOutput, decode_correction
from inekf import DTYPE, SequenceProvider, decode_meas_noise, static_providers
from nav_errors import CheckpointFormatError, InvalidInputError
from nav_models import FilterConfig, LifParams, NetConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPKNAV\x00\x01"
CHECKPOINT_FORMAT = "spikenav-ckpt/1"
INIT_STD = 0.02


# ============================================================================
# SPIKE FUNCTION
# ============================================================================

def heaviside(x: torch.Tensor) -> torch.Tensor:
    return (x >= 0).to(x)


def atan_primitive(x: torch.Tensor, alpha: float) -> torch.Tensor:
    """Smooth spike: arctan(pi/2 alpha x) / pi + 1/2"""
    return torch.atan(math.pi / 2 * alpha * x) / math.pi + 0.5


class ATan(torch.autograd.Function):
    """Heaviside forward, arctan-derivative backward"""

    @staticmethod
    def forward(ctx, x: torch.Tensor, alpha: float):
        if x.requires_grad:
            ctx.save_for_backward(x)
            ctx.alpha = alpha
        return heaviside(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        grad_x = None
        if ctx.needs_input_grad[0]:
            x, = ctx.saved_tensors
            grad_x = ctx.alpha / 2 / (1 + (math.pi / 2 * ctx.alpha * x).pow(2)) * grad_output
        return grad_x, None


class SpikeFunction(nn.Module):
    """
    Threshold nonlinearity with two modes

    spiking=True: binary output, surrogate gradient.
    spiking=False: the smooth arctan itself, used for finite-difference gradient checks.
    """

    def __init__(self, alpha: float, spiking: bool = True):
        super().__init__()
        self.alpha = alpha
        self.spiking = spiking

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.spiking:
            return ATan.apply(x, self.alpha)
        return atan_primitive(x, self.alpha)


def surrogate(u, p: LifParams) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Smooth spike value and its derivative at membrane potential u

    Returns:
        (s_approx, ds_du) with u measured relative to the threshold
    """
    x = torch.as_tensor(u, dtype=torch.float64) - p.u_thr
    s_approx = atan_primitive(x, p.alpha)
    ds_du = p.alpha / 2 / (1 + (math.pi / 2 * p.alpha * x) ** 2)
    return s_approx, ds_du


# ============================================================================
# LIF
# ============================================================================

def _as_potential(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(value, dtype=torch.float64)


def lif_step(
    h_prev,
    x,
    p: LifParams,
    spike_fn: Optional[SpikeFunction] = None
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    One LIF update: U = H + I; S = 1[U >= u_thr]; H' = v_reset S + (1 - S) beta U

    Returns:
        (U, S, H')
    """
    h_prev = _as_potential(h_prev)
    x = _as_potential(x)
    u = h_prev + x
    s = spike_fn(u - p.u_thr) if spike_fn is not None else heaviside(u - p.u_thr)
    h = p.v_reset * s + (1 - s) * p.beta * u
    return u, s, h


class LIFNode(nn.Module):
    """Multi-step LIF over the leading segment axis; membrane starts from zero each call"""

    def __init__(self, p: LifParams, spiking: bool = True):
        super().__init__()
        self.p = p
        self.spike = SpikeFunction(p.alpha, spiking)
        self.last_rate: Optional[float] = None

    def forward(self, x_seq: torch.Tensor) -> torch.Tensor:
        h = torch.zeros_like(x_seq[0])
        spikes = []
        for t in range(x_seq.shape[0]):
            _, s, h = lif_step(h, x_seq[t], self.p, self.spike)
            spikes.append(s)
        out = torch.stack(spikes)
        self.last_rate = float(out.detach().mean())
        return out


class SeqBatchNorm(nn.Module):
    """BatchNorm1d over the last axis of a tensor with any leading shape"""

    def __init__(self, features: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(features)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape
        return self.bn(x.reshape(-1, shape[-1])).reshape(shape)


# ============================================================================
# NETWORK
# ============================================================================

class SpikeEncoder(nn.Module):
    """Conv1d along time per channel, batch norm, then LIF replicated over ts segments"""

    def __init__(self, cfg: NetConfig, lif: LifParams):
        super().__init__()
        self.ts = cfg.ts
        self.conv = nn.Conv1d(cfg.channels, cfg.channels, kernel_size=5, padding=2)
        self.bn = nn.BatchNorm1d(cfg.channels)
        self.lif = LIFNode(lif)

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        """(B, N, 6) -> (ts, B, 6, N)"""
        current = self.bn(self.conv(window.transpose(1, 2)))
        return self.lif(current.unsqueeze(0).repeat(self.ts, 1, 1, 1))


class ChannelEmbedding(nn.Module):
    """Each channel's spike train (length N) is projected to d_model by one shared linear map"""

    def __init__(self, cfg: NetConfig, lif: LifParams):
        super().__init__()
        self.linear = nn.Linear(cfg.window_n, cfg.d_model)
        self.bn = SeqBatchNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)
        self.lif = LIFNode(lif)

    def forward(self, spikes: torch.Tensor) -> torch.Tensor:
        return self.lif(self.dropout(self.bn(self.linear(spikes))))


class SpikingSelfAttention(nn.Module):
    """
    Spike-valued Q, K, V; scores are integer dot products scaled by 1/sqrt(d_head), no softmax.
    Returns the pre-activation current of the output projection.
    """

    def __init__(self, cfg: NetConfig, lif: LifParams):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.scale = 1.0 / math.sqrt(d // cfg.n_heads)
        self.q_linear, self.k_linear, self.v_linear = (nn.Linear(d, d) for _ in range(3))
        self.q_bn, self.k_bn, self.v_bn = (SeqBatchNorm(d) for _ in range(3))
        self.q_lif, self.k_lif, self.v_lif = (LIFNode(lif) for _ in range(3))
        self.attn_lif = LIFNode(lif)
        self.proj = nn.Linear(d, d)
        self.proj_bn = SeqBatchNorm(d)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        ts, B, C, d = x.shape
        return x.reshape(ts, B, C, self.n_heads, d // self.n_heads).transpose(2, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ts, B, C, d = x.shape
        q = self._heads(self.q_lif(self.q_bn(self.q_linear(x))))
        k = self._heads(self.k_lif(self.k_bn(self.k_linear(x))))
        v = self._heads(self.v_lif(self.v_bn(self.v_linear(x))))
        attn = q @ k.transpose(-1, -2)
        out = (attn @ v) * self.scale
        out = self.attn_lif(out.transpose(2, 3).reshape(ts, B, C, d))
        return self.proj_bn(self.proj(out))


class SpikingBlock(nn.Module):
    """SSA and MLP sublayers; each residual joins at the membrane so outputs stay binary"""

    def __init__(self, cfg: NetConfig, lif: LifParams):
        super().__init__()
        hidden = cfg.d_model * cfg.mlp_ratio
        self.attn = SpikingSelfAttention(cfg, lif)
        self.attn_out = LIFNode(lif)
        self.fc1 = nn.Linear(cfg.d_model, hidden)
        self.bn1 = SeqBatchNorm(hidden)
        self.dropout = nn.Dropout(cfg.dropout)
        self.lif1 = LIFNode(lif)
        self.fc2 = nn.Linear(hidden, cfg.d_model)
        self.bn2 = SeqBatchNorm(cfg.d_model)
        self.mlp_out = LIFNode(lif)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.attn_out(self.attn(x) + x)
        h = self.lif1(self.dropout(self.bn1(self.fc1(x))))
        return self.mlp_out(self.bn2(self.fc2(h)) + x)


class SpikingNavNet(nn.Module):
    """
    Encoder -> channel-wise embedding -> spiking transformer blocks -> rate-decoded head

    Head: mean spike rate over segments, flattened over tokens, linear to 14.
    tanh bounds the c (0:6) and r (12:14) components; b (6:12) is left linear.
    """

    def __init__(self, cfg: NetConfig, lif: LifParams):
        super().__init__()
        self.cfg = cfg
        self.lif_params = lif
        self.encoder = SpikeEncoder(cfg, lif)
        self.embedding = ChannelEmbedding(cfg, lif)
        self.blocks = nn.ModuleList(SpikingBlock(cfg, lif) for _ in range(cfg.n_blocks))
        self.head = nn.Linear(cfg.channels * cfg.d_model, 14)

    def check_window(self, window: torch.Tensor):
        if window.dim() != 3 or tuple(window.shape[1:]) != (self.cfg.window_n, self.cfg.channels):
            raise InvalidInputError(
                f"expected windows of shape (B, {self.cfg.window_n}, {self.cfg.channels}), got {tuple(window.shape)}"
            )

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        if window.dim() == 2:
            window = window.unsqueeze(0)
        self.check_window(window)
        x = self.embedding(self.encoder(window))
        for block in self.blocks:
            x = block(x)
        y = self.head(x.mean(0).flatten(1))
        return torch.cat([torch.tanh(y[:, 0:6]), y[:, 6:12], torch.tanh(y[:, 12:14])], dim=1)


def init_weights(net: nn.Module):
    """Truncated-normal linear/conv weights, zero biases, zero output head"""
    for module in net.modules():
        if isinstance(module, (nn.Linear, nn.Conv1d)):
            nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
    if isinstance(net, SpikingNavNet):
        nn.init.zeros_(net.head.weight)
        nn.init.zeros_(net.head.bias)


def build_net(cfg: NetConfig, lif: LifParams, seed: int = 0) -> SpikingNavNet:
    """Construct and initialize a network without touching the global RNG"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SpikingNavNet(cfg, lif)
        init_weights(net)
    logger.info(f"Built SNN: {count_parameters(net):,} parameters (window {cfg.window_n}, d_model {cfg.d_model})")
    return net


def set_surrogate_mode(net: nn.Module, spiking: bool):
    for module in net.modules():
        if isinstance(module, SpikeFunction):
            module.spiking = spiking


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def firing_rates(net: nn.Module) -> Dict[str, float]:
    """Mean spike rate of every LIF layer from the last forward pass"""
    return {name: m.last_rate for name, m in net.named_modules() if isinstance(m, LIFNode) and m.last_rate is not None}


# ============================================================================
# INFERENCE
# ============================================================================

def _window_tensor(net: SpikingNavNet, window) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    return torch.as_tensor(np.asarray(window), dtype=dtype)


def spike_encode(net: SpikingNavNet, window) -> torch.Tensor:
    """Encoder spikes of one (N, 6) window as a (ts, N, 6) binary tensor"""
    x = _window_tensor(net, window)
    if x.dim() != 2:
        raise InvalidInputError(f"expected a single (N, 6) window, got shape {tuple(x.shape)}")
    net.eval()
    with torch.no_grad():
        net.check_window(x.unsqueeze(0))
        spikes = net.encoder(x.unsqueeze(0))
    return spikes[:, 0].transpose(1, 2)


def forward(net: SpikingNavNet, window) -> NetOutput:
    """Deterministic inference on one (N, 6) window"""
    net.eval()
    with torch.no_grad():
        y = net(_window_tensor(net, window))[0]
    return NetOutput.from_vector(y.to(DTYPE))


def window_starts(n: int, window_n: int) -> np.ndarray:
    """Starts of the consecutive, non-overlapping full windows in a stream of n samples"""
    if n < window_n:
        return np.zeros(0, dtype=int)
    return np.arange(0, n - window_n + 1, window_n, dtype=int)


def causal_window_index(n: int, window_n: int, n_windows: int) -> np.ndarray:
    """
    Provider slot for every sample: 0 is the static fallback, w + 1 is window w

    Sample k takes the latest window whose last sample is at or before k, so the
    first window_n - 1 samples run on the static providers.
    """
    return np.minimum((np.arange(n) + 1) // window_n, n_windows)


def net_providers(
    net: SpikingNavNet,
    seq: ImuSequence,
    filter_cfg: FilterConfig,
    batch: int = 64
) -> Tuple[object, object]:
    """
    Per-sample measurement-noise and correction providers driven by the network

    Causal: the outputs applied at sample k only depend on samples up to k.
    Samples before the first full window use the static noise and identity correction.

    Returns:
        (noise provider, correction provider)
    """
    N = net.cfg.window_n
    n = len(seq)
    starts = window_starts(n, N)
    if len(starts) == 0:
        logger.warning(f"⚠️  Sequence of {n} samples is shorter than one window ({N}); using static noise")
        return static_providers(filter_cfg)

    stacked = seq.stacked()
    windows = np.stack([stacked[s:s + N] for s in starts])
    outputs = []
    net.eval()
    with torch.no_grad():
        for i in range(0, len(windows), batch):
            outputs.append(net(_window_tensor(net, windows[i:i + batch])).to(DTYPE))
    y = torch.cat(outputs)

    head = NetOutput.from_vector(y)
    corr = decode_correction(head, net.cfg.beta_s)
    noise = decode_meas_noise(head, filter_cfg.sigma_lat2, filter_cfg.sigma_up2)
    static_noise = torch.as_tensor(
        decode_meas_noise(NetOutput.zeros(), filter_cfg.sigma_lat2, filter_cfg.sigma_up2), dtype=DTYPE
    )
    identity = Correction(c_inv_diag=torch.ones(6, dtype=DTYPE), bias=torch.zeros(6, dtype=DTYPE))

    corrections = [identity] + [Correction(c_inv_diag=corr.c_inv_diag[w], bias=corr.bias[w]) for w in range(len(starts))]
    noises = [static_noise] + [noise[w] for w in range(len(starts))]

    index = causal_window_index(n, N, len(starts))
    logger.info(f"SNN produced {len(starts)} window outputs for {n} samples ({N - 1} warm-up samples on static noise)")
    return SequenceProvider(noises, index), SequenceProvider(corrections, index)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(net: SpikingNavNet, path: Path, meta: Optional[dict] = None) -> Path:
    """
    Write the flat checkpoint container

    Layout: magic (8 bytes) | manifest length (uint32 LE) | JSON manifest | float32 LE blob
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    chunks = []
    offset = 0
    for name, tensor in net.state_dict().items():
        data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        tensors[name] = {"shape": list(tensor.shape), "offset": offset, "nbytes": len(data)}
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "net": net.cfg.model_dump(),
        "lif": net.lif_params.model_dump(),
        "tensors": tensors,
        "meta": meta or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    logger.info(f"✅ Checkpoint written: {path} ({offset / 1024:.1f} KiB)")
    return path


def read_checkpoint_manifest(path: Path) -> Tuple[dict, bytes]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a SpikeNav checkpoint")
    start = len(CHECKPOINT_MAGIC)
    if len(raw) < start + 4:
        raise CheckpointFormatError(f"{path}: truncated header")
    (length,) = struct.unpack("<I", raw[start:start + 4])
    try:
        manifest = json.loads(raw[start + 4:start + 4 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable manifest ({e})") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: format {manifest.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    return manifest, raw[start + 4 + length:]


def load_checkpoint(
    path: Path,
    expected_net: Optional[NetConfig] = None,
    expected_lif: Optional[LifParams] = None
) -> SpikingNavNet:
    """
    Rebuild a network from a checkpoint

    Args:
        path: Checkpoint file
        expected_net: If given, the stored NetConfig must match (dropout excepted)
        expected_lif: If given, the stored LifParams must match

    Returns:
        SpikingNavNet in eval mode
    """
    manifest, blob = read_checkpoint_manifest(path)
    cfg = NetConfig.model_validate(manifest["net"])
    lif = LifParams.model_validate(manifest["lif"])
    if expected_net is not None and cfg.model_dump(exclude={"dropout"}) != expected_net.model_dump(exclude={"dropout"}):
        raise CheckpointFormatError(f"{path}: network config {cfg.model_dump()} does not match {expected_net.model_dump()}")
    if expected_lif is not None and lif != expected_lif:
        raise CheckpointFormatError(f"{path}: LIF parameters {lif.model_dump()} do not match {expected_lif.model_dump()}")

    net = SpikingNavNet(cfg, lif)
    reference = net.state_dict()
    if set(manifest["tensors"]) != set(reference):
        raise CheckpointFormatError(f"{path}: tensor set does not match the network layout")
    state = {}
    for name, entry in manifest["tensors"].items():
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointFormatError(f"{path}: blob truncated at tensor {name}")
        values = np.frombuffer(blob[entry["offset"]:end], dtype="<f4").reshape(entry["shape"])
        if tuple(values.shape) != tuple(reference[name].shape):
            raise CheckpointFormatError(f"{path}: tensor {name} has shape {values.shape}")
        state[name] = torch.from_numpy(values.copy()).to(reference[name].dtype)
    net.load_state_dict(state)
    net.eval()
    return net
