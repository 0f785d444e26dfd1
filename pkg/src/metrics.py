"""
Objective evaluation: SI-SDR and STOI, grouped into per-condition reports.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pystoi import stoi as pystoi_stoi
from pystoi import utils as stoi_utils

from . import config as cfg
from .config import atomic_write_csv
from .errors import ConfigError, EmptyDatasetError, ShapeMismatchError, SignalTooShortError, SilentInputError
from .log import get_logger, log_event

logger = get_logger(__name__)

# STOI constants (canonical published values)
STOI_SAMPLE_RATE = 10_000
STOI_FRAME = 256
STOI_HOP = 128
STOI_SEGMENT_FRAMES = 30
STOI_DYNAMIC_RANGE = 40

RESIDUAL_FLOOR = 1e-30
OVERALL = "overall"
REPORT_COLUMNS = ["condition", "metric", "item_id", "value"]


def _check_pair(estimate, reference) -> Tuple[np.ndarray, np.ndarray]:
    estimate = np.asarray(estimate, dtype=np.float64).reshape(-1)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    if len(estimate) != len(reference):
        raise ShapeMismatchError(f"estimate has {len(estimate)} samples, reference {len(reference)}")
    return estimate, reference


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB; +inf when the residual vanishes"""
    estimate, reference = _check_pair(estimate, reference)
    estimate = estimate - estimate.mean()
    reference = reference - reference.mean()
    ref_energy = float(np.dot(reference, reference))
    if ref_energy == 0.0:
        raise SilentInputError("si_sdr reference is zero after mean removal")
    target = np.dot(estimate, reference) / ref_energy * reference
    residual = float(np.sum((estimate - target) ** 2))
    if residual < RESIDUAL_FLOOR:
        return float("inf")
    target_energy = float(np.sum(target ** 2))
    if target_energy == 0.0:
        return float("-inf")
    return float(10.0 * np.log10(target_energy / residual))


def stoi(estimate, reference, sample_rate: int = cfg.SAMPLE_RATE) -> float:
    """Short-time objective intelligibility of `estimate` against the clean `reference`"""
    estimate, reference = _check_pair(estimate, reference)
    if not np.any(reference):
        raise SilentInputError("stoi reference")
    if sample_rate != STOI_SAMPLE_RATE:
        ref_10k = stoi_utils.resample_oct(reference, STOI_SAMPLE_RATE, sample_rate)
        est_10k = stoi_utils.resample_oct(estimate, STOI_SAMPLE_RATE, sample_rate)
    else:
        ref_10k, est_10k = reference, estimate
    kept, _ = stoi_utils.remove_silent_frames(ref_10k, est_10k, STOI_DYNAMIC_RANGE, STOI_FRAME, STOI_HOP)
    needed = STOI_FRAME + (STOI_SEGMENT_FRAMES - 1) * STOI_HOP
    if len(kept) < needed:
        raise SignalTooShortError(len(kept), needed)
    return float(pystoi_stoi(reference, estimate, sample_rate, extended=False))


METRICS: Dict[str, Callable[..., float]] = {
    "si_sdr": lambda est, ref, sr: si_sdr(est, ref),
    "stoi": stoi,
}


def parse_metrics(names: str) -> Tuple[str, ...]:
    selected = tuple(n.strip() for n in names.split(",") if n.strip())
    unknown = [n for n in selected if n not in METRICS]
    if unknown or not selected:
        raise ConfigError(f"unknown metric(s) {unknown}; choose from {sorted(METRICS)}")
    return selected


# ----------------------------
# Reports
# ----------------------------
@dataclass
class EvalReport:
    items: pd.DataFrame  # condition, metric, item_id, value
    aggregates: pd.DataFrame  # condition, metric, mean, count

    def mean(self, metric: str, condition: str = OVERALL) -> float:
        row = self.aggregates[(self.aggregates["metric"] == metric) & (self.aggregates["condition"] == condition)]
        if row.empty:
            raise KeyError(f"no aggregate for metric={metric} condition={condition}")
        return float(row["mean"].iloc[0])

    def count(self, metric: str, condition: str = OVERALL) -> int:
        row = self.aggregates[(self.aggregates["metric"] == metric) & (self.aggregates["condition"] == condition)]
        return int(row["count"].iloc[0]) if not row.empty else 0

    @property
    def conditions(self):
        return [c for c in self.aggregates["condition"].unique() if c != OVERALL]

    def to_frame(self) -> pd.DataFrame:
        """Per-item rows followed by `mean` and `count` aggregate rows"""
        mean_rows = self.aggregates.assign(item_id="mean").rename(columns={"mean": "value"})[REPORT_COLUMNS]
        count_rows = self.aggregates.assign(item_id="count", value=self.aggregates["count"].astype(float))[
            REPORT_COLUMNS
        ]
        return pd.concat([self.items, mean_rows, count_rows], ignore_index=True)

    def write_csv(self, path) -> None:
        atomic_write_csv(path, self.to_frame())


def _aggregate(items: pd.DataFrame) -> pd.DataFrame:
    grouped = items.groupby(["condition", "metric"], sort=True)["value"].agg(["mean", "count"]).reset_index()
    overall = items.groupby("metric", sort=True)["value"].agg(["mean", "count"]).reset_index()
    overall.insert(0, "condition", OVERALL)
    return pd.concat([grouped, overall], ignore_index=True)


def evaluate(
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
    labels: Optional[Sequence[str]] = None,
    metrics: Sequence[str] = ("si_sdr", "stoi"),
    sample_rate: int = cfg.SAMPLE_RATE,
    item_ids: Optional[Sequence[str]] = None,
) -> EvalReport:
    """Score every (estimate, reference) pair and group the means per condition label"""
    if not pairs:
        raise EmptyDatasetError("evaluate needs at least one pair")
    labels = list(labels) if labels is not None else ["all"] * len(pairs)
    item_ids = list(item_ids) if item_ids is not None else [f"item_{i:04d}" for i in range(len(pairs))]
    if len(labels) != len(pairs) or len(item_ids) != len(pairs):
        raise ShapeMismatchError(f"{len(pairs)} pairs but {len(labels)} labels and {len(item_ids)} ids")
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ConfigError(f"unknown metric(s) {unknown}; choose from {sorted(METRICS)}")

    rows = []
    for (estimate, reference), label, item_id in zip(pairs, labels, item_ids):
        estimate, reference = _check_pair(estimate, reference)
        for metric in metrics:
            rows.append({
                "condition": label, "metric": metric, "item_id": item_id,
                "value": METRICS[metric](estimate, reference, sample_rate),
            })
    items = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    report = EvalReport(items, _aggregate(items))
    for metric in metrics:
        log_event(logger, "evaluated", metric=metric, mean=report.mean(metric), count=report.count(metric))
    return report


def improvement(before: EvalReport, after: EvalReport, metric: str, condition: str = OVERALL) -> float:
    """Mean metric delta of `after` over `before` (e.g. enhanced vs noisy)"""
    return after.mean(metric, condition) - before.mean(metric, condition)
