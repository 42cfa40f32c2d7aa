"""Distribution divergence metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def rmse(matched, target) -> float:
    a, b = _pair(matched, target)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def smape(matched, target) -> float:
    """Symmetric percentage error in [0, 200]; a 0/0 term counts as 0."""
    a, b = _pair(matched, target)
    den = (np.abs(a) + np.abs(b)) / 2.0
    num = np.abs(a - b)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(100.0 * terms.mean())


def divergence_table(matched, target) -> np.ndarray:
    a, b = _pair(matched, target)
    return np.abs(a - b)


@dataclass
class Metrics:
    """Uniform average over intervals of the per-interval RMSE and SMAPE."""

    rmse: float
    smape: float
    n_intervals: int
    per_interval_rmse: list = field(default_factory=list, repr=False)
    per_interval_smape: list = field(default_factory=list, repr=False)
    skipped: int = 0

    def summary(self) -> dict:
        return {"rmse": self.rmse, "smape": self.smape, "n_intervals": self.n_intervals, "skipped": self.skipped}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def aggregate(matched_rows, target_rows, skipped: int = 0) -> Metrics:
    """Metrics over a sequence of intervals, each an N-vector pair."""
    matched_rows = np.atleast_2d(np.asarray(matched_rows, dtype=np.float64))
    target_rows = np.atleast_2d(np.asarray(target_rows, dtype=np.float64))
    if matched_rows.shape != target_rows.shape:
        raise ValueError(f"shape mismatch: {matched_rows.shape} vs {target_rows.shape}")
    if matched_rows.shape[0] == 0:
        raise ValueError("no intervals to evaluate")
    r = [rmse(a, b) for a, b in zip(matched_rows, target_rows)]
    s = [smape(a, b) for a, b in zip(matched_rows, target_rows)]
    return Metrics(float(np.mean(r)), float(np.mean(s)), len(r), r, s, skipped)


def write_divergence_csv(path, matched, target, intervals=None) -> None:
    """Rows of ``interval, grid, matched, target, abs_divergence``."""
    a, b = _pair(matched, target)
    if a.ndim != 2:
        raise ValueError("expected (intervals, grids) arrays")
    intervals = np.arange(a.shape[0]) if intervals is None else np.asarray(intervals)
    div = divergence_table(a, b)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval", "grid", "matched", "target", "abs_divergence"])
        for k, t in enumerate(intervals):
            for i in range(a.shape[1]):
                w.writerow([int(t), i, repr(float(a[k, i])), repr(float(b[k, i])), repr(float(div[k, i]))])
