"""
Odometry Metrics - Relative translation and rotation error
KITTI-style scoring over 100-800 m subsequences of the ground-truth path
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from datasets import Trajectory
from geom3d import so3_log
from nav_errors import DataFormatError, InvalidInputError, StructuralError
from nav_models import LengthBreakdown, MetricReport

logger = logging.getLogger(__name__)

SEGMENT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
DEFAULT_STEP = 10
RAD_PER_M_TO_DEG_PER_KM = 180.0 / math.pi * 1000.0


def cumulative_lengths(truth: Trajectory) -> np.ndarray:
    """Distance travelled along the truth path up to each pose, starting at 0"""
    steps = np.linalg.norm(np.diff(truth.positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _check_pair(estimate: Trajectory, truth: Trajectory):
    if len(estimate) != len(truth):
        raise InvalidInputError(f"estimate has {len(estimate)} poses, truth has {len(truth)}")
    if len(truth) < 2:
        raise InvalidInputError("need at least two poses to evaluate")


def _pair_errors(
    estimate: Trajectory, truth: Trajectory, first: np.ndarray, last: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Translation and rotation magnitude of (est_i^-1 est_j)^-1 (gt_i^-1 gt_j) for each pair
    """
    Rt_est = np.swapaxes(estimate.rotations[first], -1, -2)
    Rt_gt = np.swapaxes(truth.rotations[first], -1, -2)
    R_est = Rt_est @ estimate.rotations[last]
    R_gt = Rt_gt @ truth.rotations[last]
    t_est = np.einsum("kij,kj->ki", Rt_est, estimate.positions[last] - estimate.positions[first])
    t_gt = np.einsum("kij,kj->ki", Rt_gt, truth.positions[last] - truth.positions[first])

    R_est_t = np.swapaxes(R_est, -1, -2)
    err_R = R_est_t @ R_gt
    err_t = np.einsum("kij,kj->ki", R_est_t, t_gt - t_est)
    return np.linalg.norm(err_t, axis=1), np.linalg.norm(so3_log(err_R).reshape(-1, 3), axis=1)


def _summarize(
    estimate: Trajectory,
    truth: Trajectory,
    first: np.ndarray,
    last: np.ndarray,
    lengths: np.ndarray,
    step: int,
    path_length: float
) -> MetricReport:
    if len(first) == 0:
        return MetricReport(available=False, n_pairs=0, path_length_m=path_length, step=step)

    t_err, r_err = _pair_errors(estimate, truth, first, last)
    rte = t_err / lengths
    rre = r_err / lengths

    per_length = {}
    for L in SEGMENT_LENGTHS:
        mask = lengths == L
        count = int(np.count_nonzero(mask))
        if count == 0:
            continue
        per_length[L] = LengthBreakdown(
            rte_percent=float(np.mean(rte[mask]) * 100.0),
            rre_deg_per_km=float(np.mean(rre[mask]) * RAD_PER_M_TO_DEG_PER_KM),
            count=count,
        )
    return MetricReport(
        rte_percent=float(np.mean(rte) * 100.0),
        rre_deg_per_km=float(np.mean(rre) * RAD_PER_M_TO_DEG_PER_KM),
        per_length=per_length,
        n_pairs=len(first),
        available=True,
        path_length_m=path_length,
        step=step,
    )


def evaluate(
    estimate: Trajectory,
    truth: Trajectory,
    step: int = DEFAULT_STEP,
    exhaustive: bool = False
) -> MetricReport:
    """
    Average relative errors over every (start, length) pair

    Args:
        estimate: Estimated trajectory, time-aligned with truth
        truth: Ground truth
        step: Start-index subsampling (ignored when exhaustive)
        exhaustive: Use every start index

    Returns:
        MetricReport (available=False when the truth path is shorter than 100 m)
    """
    _check_pair(estimate, truth)
    step = 1 if exhaustive else step
    dist = cumulative_lengths(truth)

    starts = np.arange(0, len(truth), step)
    seg = np.asarray(SEGMENT_LENGTHS, dtype=float)
    first = np.repeat(starts, len(seg))
    lengths = np.tile(seg, len(starts))
    last = np.searchsorted(dist, dist[first] + lengths, side="left")
    valid = last < len(truth)

    report = _summarize(estimate, truth, first[valid], last[valid], lengths[valid], step, float(dist[-1]))
    if not report.available:
        logger.warning(f"⚠️  Truth path is {dist[-1]:.1f} m, shorter than {SEGMENT_LENGTHS[0]} m: metrics unavailable")
    return report


def evaluate_brute_force(estimate: Trajectory, truth: Trajectory, step: int = DEFAULT_STEP) -> MetricReport:
    """Same metric with a linear scan for every endpoint; reference for evaluate()"""
    _check_pair(estimate, truth)
    dist = cumulative_lengths(truth)
    first, last, lengths = [], [], []
    for i in range(0, len(truth), step):
        for L in SEGMENT_LENGTHS:
            for j in range(i, len(truth)):
                if dist[j] >= dist[i] + L:
                    first.append(i)
                    last.append(j)
                    lengths.append(float(L))
                    break
    return _summarize(
        estimate, truth,
        np.asarray(first, dtype=int), np.asarray(last, dtype=int), np.asarray(lengths, dtype=float),
        step, float(dist[-1]),
    )


# ============================================================================
# REPORTS
# ============================================================================

def write_report(report: MetricReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2))
    return path


def format_table(rows: Sequence[Tuple[str, MetricReport, Optional[float]]]) -> str:
    """
    Fixed-width table: Seq, Length(m), RTE(%), RRE(deg/km), T(s), plus an average row

    Args:
        rows: (sequence name, report, filter runtime in seconds or None)
    """
    header = f"{'Seq':<10}{'Length(m)':>12}{'RTE(%)':>10}{'RRE(deg/km)':>14}{'T(s)':>10}"
    lines = [header, "-" * len(header)]

    def fmt_row(name: str, length: float, rte: Optional[float], rre: Optional[float], runtime: Optional[float]) -> str:
        rte_s = f"{rte:.2f}" if rte is not None else "n/a"
        rre_s = f"{rre:.2f}" if rre is not None else "n/a"
        t_s = f"{runtime:.1f}" if runtime is not None else "-"
        return f"{name:<10}{length:>12.0f}{rte_s:>10}{rre_s:>14}{t_s:>10}"

    for name, report, runtime in rows:
        if report.available:
            lines.append(fmt_row(name, report.path_length_m, report.rte_percent, report.rre_deg_per_km, runtime))
        else:
            lines.append(fmt_row(name, report.path_length_m, None, None, runtime))

    scored = [r for _, r, _ in rows if r.available]
    if len(rows) > 1:
        runtimes = [t for _, _, t in rows if t is not None]
        lines.append("-" * len(header))
        lines.append(fmt_row(
            "Avg",
            float(np.sum([r.path_length_m for _, r, _ in rows])),
            float(np.mean([r.rte_percent for r in scored])) if scored else None,
            float(np.mean([r.rre_deg_per_km for r in scored])) if scored else None,
            float(np.mean(runtimes)) if runtimes else None,
        ))
    return "\n".join(lines) + "\n"


def load_reports(path: Path) -> Dict[str, MetricReport]:
    """Per-sequence reports as written by `eval --out`"""
    path = Path(path)
    if not path.is_file():
        raise StructuralError(f"{path}: file not found")
    try:
        raw = json.loads(path.read_text())
        return {name: MetricReport.model_validate(report) for name, report in raw.items()}
    except (json.JSONDecodeError, AttributeError, ValidationError) as e:
        raise DataFormatError(f"not an eval report ({e})", str(path)) from e


def mean_rte(reports: Dict[str, MetricReport]) -> Optional[float]:
    """Average RTE over the sequences long enough to score, None when there are none"""
    scored = [r.rte_percent for r in reports.values() if r.available]
    return float(np.mean(scored)) if scored else None


def compare_seed_medians(adaptive: Sequence[float], static: Sequence[float]) -> Tuple[float, float, bool]:
    """
    Median RTE across training seeds for the adaptive and static runs

    Returns:
        (adaptive median, static median, True when the adaptive median does not exceed the static one)
    """
    if len(adaptive) == 0 or len(static) == 0:
        raise InvalidInputError("need at least one score per mode to compare medians")
    adaptive_median = float(np.median(adaptive))
    static_median = float(np.median(static))
    ok = adaptive_median <= static_median
    if ok:
        logger.info(f"✅ Median RTE adaptive {adaptive_median:.3f}% <= static {static_median:.3f}%")
    else:
        logger.warning(f"⚠️ Median RTE adaptive {adaptive_median:.3f}% > static {static_median:.3f}%")
    return adaptive_median, static_median, ok
