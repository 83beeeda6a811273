"""
SpikeNav CLI - Command-line entry point
synth -> corrupt -> split -> train -> run -> eval, one subcommand per stage

Usage:
    python cli.py synth --kind circle --duration 60 --out data/synth/circle
    python cli.py corrupt data/synth/circle/imu.csv --preset kitti-lowcost --seed 3 --out data/noisy/imu.csv
    python cli.py run data/synth/circle --mode static --out out/circle_est.csv
    python cli.py eval --estimate out/circle_est.csv --truth data/synth/circle/truth.csv
"""
import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError
from pythonjsonlogger import jsonlogger

from datasets import (
    align_truth,
    inject_gap,
    load_sequence,
    load_split,
    load_split_manifest,
    make_split_manifest,
    read_imu_csv,
    read_trajectory_csv,
    save_split_manifest,
    synthesize,
    write_imu_csv,
    write_trajectory_csv,
)
from evalmetrics import DEFAULT_STEP, evaluate, format_table
from imu_model import corrupt, draw_biases
from inekf import FilterState, InvariantEKF, default_covariance, static_providers
from nav_errors import ConfigError, InvalidInputError, NumericFailureError, SpikeNavError, StructuralError
from nav_models import CORRUPTION_PRESETS, CorruptionSidecar, RunConfig, RunMeta, SynthSpec
from snn_core import build_net, count_parameters, load_checkpoint, net_providers
from trainer import Trainer, build_windows

logger = logging.getLogger("spikenav")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: str = "INFO", fmt: str = "text"):
    """Configure the root logger once per process (text or JSON lines on stderr)"""
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(jsonlogger.JsonFormatter('%(asctime)s %(name)s %(levelname)s %(message)s'))
    else:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), handlers=[handler], force=True)


def with_updates(model: BaseModel, **updates) -> BaseModel:
    """Copy of a config model with CLI overrides applied, validated like the original"""
    return type(model).model_validate({**model.model_dump(), **updates})


def meta_path(estimate: Path) -> Path:
    return Path(estimate).with_suffix(".meta.json")


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_synth(args, cfg: RunConfig) -> int:
    segments = [{"duration": d, "speed": s, "yaw_rate": w} for d, s, w in args.segment or []]
    duration = args.duration
    if args.kind == "piecewise" and segments:
        duration = sum(seg["duration"] for seg in segments)
    spec = SynthSpec(
        kind=args.kind, duration=duration, rate=args.rate, speed=args.speed,
        yaw_rate=args.yaw_rate, lateral_slip_std=args.slip_std, seed=args.seed,
        segments=segments,
    )
    imu, truth = synthesize(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_imu_csv(imu, out / "imu.csv")
    write_trajectory_csv(truth, out / "truth.csv")
    print(f"synth {spec.kind}: {len(imu)} IMU samples, {len(truth)} truth poses, "
          f"final position {np.round(truth.positions[-1], 6).tolist()} -> {out}")
    return 0


def cmd_corrupt(args, cfg: RunConfig) -> int:
    if args.preset is not None:
        spec = CORRUPTION_PRESETS[args.preset](cfg.corruption.rng_seed)
    else:
        spec = cfg.corruption
    if args.seed is not None:
        spec = with_updates(spec, rng_seed=args.seed)

    source = Path(args.input)
    seq = read_imu_csv(source)
    noisy = corrupt(seq, spec)
    if args.gap_start is not None:
        if args.gap_duration is None or args.gap_duration <= 0:
            raise InvalidInputError("--gap-start needs a positive --gap-duration")
        noisy = inject_gap(noisy, args.gap_start, args.gap_duration)

    out = Path(args.out)
    write_imu_csv(noisy, out)
    gyro_bias, accel_bias = draw_biases(spec)
    sidecar = CorruptionSidecar(
        source=str(source), preset=args.preset, seed=spec.rng_seed,
        gyro_bias=gyro_bias.tolist(), accel_bias=accel_bias.tolist(),
        n_samples=len(noisy), spec=spec,
    )
    out.with_suffix(".corruption.json").write_text(sidecar.model_dump_json(indent=2))
    logger.info(f"✅ Corrupted {len(seq)} samples (seed {spec.rng_seed}) -> {out}")
    return 0


def cmd_split(args, cfg: RunConfig) -> int:
    root = Path(args.root or cfg.paths.dataset_root)
    if not root.is_dir():
        raise StructuralError(f"{root}: dataset root not found")
    available = sorted(p.name for p in root.iterdir() if p.is_dir())
    manifest = make_split_manifest(available, args.train_seqs, args.test_seqs, args.train_seconds)
    out = Path(args.out or cfg.paths.split_manifest or (cfg.paths.output_dir / "split.json"))
    save_split_manifest(manifest, out)
    logger.info(
        f"✅ Split manifest: {len(manifest.train)} train, {len(manifest.val)} val, "
        f"{len(manifest.test)} test -> {out}"
    )
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    manifest_file = args.manifest or cfg.paths.split_manifest
    if manifest_file is None:
        raise ConfigError("no split manifest (use --manifest or paths.split_manifest)")
    root = Path(args.root or cfg.paths.dataset_root)
    manifest = load_split_manifest(Path(manifest_file))

    train_cfg = cfg.train
    overrides = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed)) if v is not None}
    if overrides:
        train_cfg = with_updates(train_cfg, **overrides)
    window_n, stride = train_cfg.window_n, train_cfg.effective_stride

    train_windows, val_windows = [], []
    for name, seq, truth in load_split(root, manifest.train):
        train_windows.extend(build_windows(seq, truth, window_n, stride, name=name))
    for name, seq, truth in load_split(root, manifest.val):
        val_windows.extend(build_windows(seq, truth, window_n, window_n, name=name))
    if not train_windows:
        raise StructuralError(f"training split yields no windows of {window_n} samples")

    net_cfg = with_updates(cfg.net, dropout=train_cfg.dropout)
    net = build_net(net_cfg, cfg.lif, seed=train_cfg.seed)
    out = Path(args.output_dir or cfg.paths.output_dir)
    Trainer(net, cfg.filter, train_cfg, out).fit(train_windows, val_windows)
    logger.info(f"✅ Trained {count_parameters(net):,} parameters -> {out}")
    return 0


def _load_run_input(path: Path, truth_path: Optional[Path]):
    path = Path(path)
    truth = None
    if path.is_dir():
        seq, truth = load_sequence(path)
    else:
        seq = read_imu_csv(path)
    if truth_path is not None:
        truth_path = Path(truth_path)
        truth = load_sequence(truth_path)[1] if truth_path.is_dir() else read_trajectory_csv(truth_path)
    return seq, truth


def cmd_run(args, cfg: RunConfig) -> int:
    checkpoint = args.checkpoint or cfg.paths.checkpoint
    mode = args.mode or ("adaptive" if args.checkpoint else cfg.mode)
    if mode == "adaptive" and checkpoint is None:
        raise ConfigError("adaptive mode needs a checkpoint (use --checkpoint or paths.checkpoint)")

    seq, truth = _load_run_input(args.input, args.truth)
    if len(seq) == 0:
        raise InvalidInputError(f"{args.input}: no IMU samples")

    filter_cfg = cfg.filter
    if mode == "open-loop":
        filter_cfg = with_updates(filter_cfg, updates_enabled=False)
    ekf = InvariantEKF(filter_cfg)

    if mode == "adaptive":
        net = load_checkpoint(Path(checkpoint), expected_net=cfg.net, expected_lif=cfg.lif)
        noise_source, corr_source = net_providers(net, seq, filter_cfg)
    else:
        noise_source, corr_source = static_providers(filter_cfg)

    if truth is not None:
        init = FilterState.from_truth(align_truth(truth, seq.t[:1]), 0)
    else:
        logger.warning("⚠️  No ground truth given: starting from the identity pose at rest")
        init = FilterState.identity()

    started = time.perf_counter()
    estimate = ekf.run_sequence(seq, init, default_covariance(filter_cfg), noise_source, corr_source)
    runtime = time.perf_counter() - started
    if not (np.isfinite(estimate.positions).all() and np.isfinite(estimate.rotations).all()):
        raise NumericFailureError("filter state became non-finite", mode=mode)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(estimate, out)
    meta = RunMeta(
        mode=mode, n_samples=len(seq), runtime_s=runtime,
        checkpoint=str(checkpoint) if mode == "adaptive" else None,
        gap_events=ekf.gap_events, skipped_updates=ekf.skipped_updates,
    )
    meta_path(out).write_text(meta.model_dump_json(indent=2))
    logger.info(f"✅ {mode} run: {len(seq)} samples in {runtime:.2f} s -> {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    estimates: List[str] = args.estimate
    truths: List[str] = args.truth
    if len(estimates) != len(truths):
        raise InvalidInputError(f"{len(estimates)} estimates but {len(truths)} truths")
    names = args.name or [Path(e).stem for e in estimates]
    if len(names) != len(estimates):
        raise InvalidInputError(f"{len(names)} names for {len(estimates)} estimates")

    rows, reports = [], {}
    for name, est_file, truth_file in zip(names, estimates, truths):
        estimate = read_trajectory_csv(Path(est_file))
        truth_file = Path(truth_file)
        truth = load_sequence(truth_file)[1] if truth_file.is_dir() else read_trajectory_csv(truth_file)
        report = evaluate(estimate, align_truth(truth, estimate.times), step=args.step, exhaustive=args.exhaustive)

        runtime = None
        meta_file = meta_path(Path(est_file))
        if meta_file.is_file():
            runtime = RunMeta.model_validate_json(meta_file.read_text()).runtime_s
        rows.append((name, report, runtime))
        reports[name] = report.model_dump(mode="json")

    table = format_table(rows)
    print(table, end="")
    if args.out is not None:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(reports, indent=2, sort_keys=True))
        out.with_suffix(".txt").write_text(table)
        logger.info(f"✅ Report written: {out}")
    return 0


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikenav", description="SNN-aided InEKF dead reckoning toolkit")
    parser.add_argument("--config", type=Path, default=None, help="JSON config file (RunConfig schema)")
    parser.add_argument("--log-level", default=os.getenv("LOG_LEVEL", "INFO"), help="DEBUG, INFO, WARNING, ERROR")
    parser.add_argument("--log-format", choices=["text", "json"], default=os.getenv("LOG_FORMAT", "text"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Write a noise-free synthetic IMU + truth pair")
    p.add_argument("--kind", choices=["straight", "circle", "figure-eight", "piecewise"], default="circle")
    p.add_argument("--duration", type=float, default=60.0, help="Seconds")
    p.add_argument("--rate", type=float, default=100.0, help="Hz")
    p.add_argument("--speed", type=float, default=1.0, help="m/s")
    p.add_argument("--yaw-rate", type=float, default=0.1, help="rad/s")
    p.add_argument("--slip-std", type=float, default=0.0, help="AR(1) lateral slip std (m/s)")
    p.add_argument("--segment", nargs=3, type=float, action="append", metavar=("DURATION", "SPEED", "YAW_RATE"),
                   help="One leg of a piecewise trajectory (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="Output directory (imu.csv, truth.csv)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corrupt", help="Inject low-cost IMU errors into a clean IMU CSV")
    p.add_argument("input", help="Clean IMU CSV")
    p.add_argument("--preset", choices=sorted(CORRUPTION_PRESETS), default=None)
    p.add_argument("--seed", type=int, default=None, help="Overrides corruption.rng_seed")
    p.add_argument("--gap-start", type=float, default=None, help="Drop samples from this time (s)")
    p.add_argument("--gap-duration", type=float, default=None, help="Length of the dropped interval (s)")
    p.add_argument("--out", required=True, help="Corrupted IMU CSV (sidecar written next to it)")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("split", help="Write the train/val/test manifest")
    p.add_argument("--root", default=None, help="Dataset root (defaults to paths.dataset_root)")
    p.add_argument("--train-seqs", nargs="*", default=None)
    p.add_argument("--test-seqs", nargs="*", default=None)
    p.add_argument("--train-seconds", type=float, default=40.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="Train the SNN end-to-end through the filter")
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--root", default=None)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="Filter one sequence and write the estimated trajectory")
    p.add_argument("input", help="Sequence directory or IMU CSV")
    p.add_argument("--truth", default=None, help="Truth CSV or sequence directory for the initial state")
    p.add_argument("--mode", choices=["adaptive", "static", "open-loop"], default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--out", required=True, help="Estimate CSV")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="Relative translation / rotation error of estimates")
    p.add_argument("--estimate", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--name", nargs="+", default=None)
    p.add_argument("--step", type=int, default=DEFAULT_STEP)
    p.add_argument("--exhaustive", action="store_true", help="Use every start index")
    p.add_argument("--out", default=None, help="JSON report (table written next to it as .txt)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level, args.log_format)

    try:
        cfg = RunConfig.load(args.config)
        return args.func(args, cfg)
    except SpikeNavError as e:
        logger.error(f"❌ {e}")
        return e.exit_code
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or e.title
        err = InvalidInputError(f"invalid {field}: {first['msg']}")
        logger.error(f"❌ {err}")
        return err.exit_code
    except ValueError as e:
        err = InvalidInputError(str(e))
        logger.error(f"❌ {err}")
        return err.exit_code
    except OSError as e:
        logger.error(f"❌ I/O error: {e}")
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
