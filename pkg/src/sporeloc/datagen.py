"""Synthetic city: hex grid, demand series, fleet split, targets and splits.

Grids are indexed row-major over a parallelogram of axial coordinates
``(q, r)``; grid ``i`` sits at ``q = i % cols``, ``r = i // cols``.
All generators are pure functions of their seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INTERVALS_PER_DAY = 96
INTERVAL_MIN = 15.0
EDGE_LENGTH_M = 531.41
TARGET_KINDS = ("uniform", "gaussian", "mixture")

_AXIAL_DIRS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


@dataclass(frozen=True, eq=False)
class HexGrid:
    rows: int
    cols: int
    coords: np.ndarray  # (N, 2) axial (q, r)
    neighbors: tuple
    edge_length: float = EDGE_LENGTH_M

    @property
    def n_grids(self) -> int:
        return self.rows * self.cols

    def hex_distance(self, i: int, j: int) -> int:
        return int(hex_distance_matrix(self)[i, j])

    def centers(self) -> np.ndarray:
        """Cartesian centers in units of the center-to-center spacing."""
        q, r = self.coords[:, 0].astype(float), self.coords[:, 1].astype(float)
        return np.stack([q + 0.5 * r, r * math.sqrt(3) / 2], axis=1)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "edge_length": self.edge_length,
            "coords": self.coords.tolist(),
            "neighbors": [list(n) for n in self.neighbors],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HexGrid":
        grid = make_hex_grid(int(data["rows"]), int(data["cols"]), float(data.get("edge_length", EDGE_LENGTH_M)))
        if "neighbors" in data and [list(n) for n in grid.neighbors] != data["neighbors"]:
            raise ValueError("grid descriptor neighbors do not match its rows/cols")
        return grid

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "HexGrid":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_hex_grid(rows: int, cols: int, edge_length: float = EDGE_LENGTH_M) -> HexGrid:
    """Parallelogram of hexagons with the 6-neighborhood clipped at the border."""
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must have at least one cell, got {rows}x{cols}")
    if not edge_length > 0:
        raise ValueError("edge_length must be positive")
    idx = np.arange(rows * cols)
    coords = np.stack([idx % cols, idx // cols], axis=1)
    nbrs = []
    for q, r in coords:
        row = []
        for dq, dr in _AXIAL_DIRS:
            qq, rr = q + dq, r + dr
            if 0 <= qq < cols and 0 <= rr < rows:
                row.append(int(rr * cols + qq))
        nbrs.append(tuple(sorted(row)))
    return HexGrid(rows, cols, coords, tuple(nbrs), float(edge_length))


def hex_distance_matrix(grid: HexGrid) -> np.ndarray:
    q = grid.coords[:, 0][:, None] - grid.coords[:, 0][None, :]
    r = grid.coords[:, 1][:, None] - grid.coords[:, 1][None, :]
    return (np.abs(q) + np.abs(r) + np.abs(q + r)) // 2


def travel_time_matrix(grid: HexGrid, speed_kmh: float = 20.0) -> np.ndarray:
    """Center-to-center travel minutes; adjacent centers are ``edge * sqrt(3)`` apart."""
    if not speed_kmh > 0:
        raise ValueError("speed must be positive")
    meters = hex_distance_matrix(grid) * grid.edge_length * math.sqrt(3)
    return meters / (speed_kmh * 1000.0 / 60.0)


def incentive_cost_matrix(grid: HexGrid, unit_cost: float = 1.0) -> np.ndarray:
    if unit_cost < 0:
        raise ValueError("unit_cost must be nonnegative")
    return unit_cost * hex_distance_matrix(grid).astype(float)


# -- demand ------------------------------------------------------------------


@dataclass(eq=False)
class DemandSeries:
    """Per-interval, per-grid vehicle counts, shape (T, N) each.

    ``dedicated`` and ``free`` are ``None`` until :func:`split_fleet` runs.
    """

    all: np.ndarray
    dedicated: np.ndarray | None = None
    free: np.ndarray | None = None
    intensity: np.ndarray | None = None
    interval: float = INTERVAL_MIN
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.all = np.asarray(self.all, dtype=np.int64)
        if self.all.ndim != 2:
            raise ValueError(f"counts must be (T, N), got {self.all.shape}")
        if np.any(self.all < 0):
            raise ValueError("counts must be nonnegative")
        if (self.dedicated is None) != (self.free is None):
            raise ValueError("dedicated and free must be given together")
        if self.dedicated is not None:
            self.dedicated = np.asarray(self.dedicated, dtype=np.int64)
            self.free = np.asarray(self.free, dtype=np.int64)
            if np.any(self.dedicated < 0) or np.any(self.free < 0):
                raise ValueError("class counts must be nonnegative")
            if not np.array_equal(self.dedicated + self.free, self.all):
                raise ValueError("all != dedicated + free")

    @property
    def n_intervals(self) -> int:
        return self.all.shape[0]

    @property
    def n_grids(self) -> int:
        return self.all.shape[1]

    @property
    def is_split(self) -> bool:
        return self.dedicated is not None

    def days(self, start: int, stop: int) -> "DemandSeries":
        sl = slice(start * INTERVALS_PER_DAY, stop * INTERVALS_PER_DAY)
        return DemandSeries(
            self.all[sl],
            None if self.dedicated is None else self.dedicated[sl],
            None if self.free is None else self.free[sl],
            self.intensity,
            self.interval,
            dict(self.meta),
        )

    def to_csv(self, path) -> None:
        if not self.is_split:
            raise ValueError("split the fleet before saving")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["interval", "grid", "all", "dedicated", "free"])
            T, N = self.all.shape
            for t in range(T):
                for i in range(N):
                    w.writerow([t, i, self.all[t, i], self.dedicated[t, i], self.free[t, i]])

    @classmethod
    def from_csv(cls, path) -> "DemandSeries":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no rows")
        try:
            t = np.array([int(r["interval"]) for r in rows])
            g = np.array([int(r["grid"]) for r in rows])
            vals = {k: np.array([int(r[k]) for r in rows]) for k in ("all", "dedicated", "free")}
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: malformed demand CSV ({exc})") from exc
        shape = (t.max() + 1, g.max() + 1)
        if len(rows) != shape[0] * shape[1]:
            raise ValueError(f"{path}: expected {shape[0] * shape[1]} rows, found {len(rows)}")
        out = {}
        for k, v in vals.items():
            arr = np.zeros(shape, dtype=np.int64)
            arr[t, g] = v
            out[k] = arr
        return cls(out["all"], out["dedicated"], out["free"])


def daily_profile(kind: str = "three_peak") -> np.ndarray:
    """Mean-one multiplier over the 96 intervals of a day."""
    if kind == "flat":
        return np.ones(INTERVALS_PER_DAY)
    if kind != "three_peak":
        raise ValueError(f"unknown profile {kind!r}")
    hours = (np.arange(INTERVALS_PER_DAY) + 0.5) * 24.0 / INTERVALS_PER_DAY
    prof = np.full(INTERVALS_PER_DAY, 0.35)
    # morning, noon and late-night peaks (hour, height, width)
    for center, height, width in ((8.5, 1.0, 1.2), (12.5, 0.8, 1.0), (23.0, 0.9, 1.3)):
        d = np.minimum(np.abs(hours - center), 24.0 - np.abs(hours - center))
        prof += height * np.exp(-0.5 * (d / width) ** 2)
    return prof / prof.mean()


def weekly_profile(kind: str = "three_peak") -> np.ndarray:
    if kind == "flat":
        return np.ones(7)
    return np.array([1.0, 1.02, 1.0, 1.03, 1.08, 0.9, 0.85])


def synth_demand(
    grid: HexGrid,
    days: int,
    seed: int,
    profile: str = "three_peak",
    mean_level: float = 8.0,
    noise: bool = True,
    hotspot_fraction: float = 0.125,
) -> DemandSeries:
    """Integer vehicle counts: intensity x daily x weekly profile, Poisson noise.

    ``mean_level`` is the mean count per ordinary grid per interval.  A few
    hotspot grids get 3 to 6 times the ordinary intensity.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    rng = np.random.default_rng(seed)
    N = grid.n_grids
    base = rng.uniform(0.7, 1.3, N)
    n_hot = max(1, int(round(hotspot_fraction * N))) if N > 1 else 0
    hot = rng.choice(N, size=n_hot, replace=False) if n_hot else np.array([], dtype=int)
    ordinary = np.setdiff1d(np.arange(N), hot)
    base[ordinary] /= base[ordinary].mean()
    base[hot] = rng.uniform(3.0, 6.0, n_hot)
    intensity = mean_level * base
    if profile == "flat":
        intensity = np.full(N, float(mean_level))
    day = daily_profile(profile)
    week = weekly_profile(profile)
    T = days * INTERVALS_PER_DAY
    t = np.arange(T)
    lam = intensity[None, :] * (day[t % INTERVALS_PER_DAY] * week[(t // INTERVALS_PER_DAY) % 7])[:, None]
    counts = rng.poisson(lam) if noise else np.rint(lam).astype(np.int64)
    meta = {"seed": int(seed), "profile": profile, "hotspots": sorted(int(h) for h in hot)}
    return DemandSeries(counts, intensity=intensity, meta=meta)


def hotspot_ratio(series: DemandSeries) -> np.ndarray:
    """Intensity of each hotspot divided by the mean ordinary intensity."""
    hot = np.array(series.meta.get("hotspots", []), dtype=int)
    ordinary = np.setdiff1d(np.arange(series.n_grids), hot)
    return series.intensity[hot] / series.intensity[ordinary].mean()


def split_fleet(series: DemandSeries, gamma: float, seed: int) -> DemandSeries:
    """Binomial split of every cell into dedicated and free vehicles."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    rng = np.random.default_rng(seed)
    ded = rng.binomial(series.all, gamma).astype(np.int64)
    meta = dict(series.meta, gamma=float(gamma), split_seed=int(seed))
    return DemandSeries(series.all, ded, series.all - ded, series.intensity, series.interval, meta)


# -- targets -----------------------------------------------------------------


@dataclass(frozen=True)
class TargetSpec:
    kind: str = "uniform"
    low: float = 0.90
    high: float = 1.10
    variance: float = 15.0
    mixture_variances: tuple = (10.0, 20.0)
    seed: int = 0

    def __post_init__(self):
        kind = self.kind.lower()
        if kind == "gaussianmixture":
            kind = "mixture"
        if kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}; choose from {TARGET_KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.low > self.high:
            raise ValueError("uniform factor range is empty")


def base_week_mean(series: DemandSeries, start_day: int = 0) -> np.ndarray:
    """Mean all-vehicle count per interval of day over seven days from ``start_day``."""
    week = series.days(start_day, start_day + 7).all
    if week.shape[0] != 7 * INTERVALS_PER_DAY:
        raise ValueError("series does not contain a full base week")
    return week.reshape(7, INTERVALS_PER_DAY, -1).mean(axis=0)


def _bump(centers: np.ndarray, c: np.ndarray, variance: float) -> np.ndarray:
    d2 = np.sum((centers - c) ** 2, axis=1)
    return np.exp(-d2 / (2.0 * variance))


def gen_target(spec: TargetSpec, base_mean, grid: HexGrid | None = None) -> np.ndarray:
    """Target all-vehicle distribution per interval of day, (96, N).

    Gaussian kinds redistribute each interval's total over a spatial bump
    centred on a seeded grid cell (distances in center-to-center units), so
    they need ``grid``.
    """
    base = np.asarray(base_mean, dtype=np.float64)
    if np.any(base < 0):
        raise ValueError("base mean has negative entries")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "uniform":
        factor = rng.uniform(spec.low, spec.high, base.shape[0])
        return np.maximum(base * factor[:, None], 0.0)
    if grid is None or grid.n_grids != base.shape[1]:
        raise ValueError("gaussian targets need the matching grid")
    centers = grid.centers()
    if spec.kind == "gaussian":
        shape = _bump(centers, centers[rng.integers(grid.n_grids)], spec.variance)
    else:
        picks = rng.choice(grid.n_grids, size=2, replace=grid.n_grids < 2)
        shape = sum(_bump(centers, centers[p], v) for p, v in zip(picks, spec.mixture_variances))
    shape = shape / shape.sum()
    return np.maximum(base.sum(axis=1)[:, None] * shape[None, :], 0.0)


# -- samples -----------------------------------------------------------------


@dataclass(eq=False)
class Samples:
    """Supervised samples; sample ``k`` predicts interval ``t[k]``.

    ``hist`` holds free-vehicle rows ``t-m .. t-1``, ``truth`` the free
    vehicles at ``t`` and ``supply`` the dedicated vehicles at ``t-1``.
    """

    t: np.ndarray
    hist: np.ndarray
    truth: np.ndarray
    supply: np.ndarray

    def __len__(self) -> int:
        return self.t.size

    def subset(self, idx) -> "Samples":
        return Samples(self.t[idx], self.hist[idx], self.truth[idx], self.supply[idx])


def make_samples(series: DemandSeries, window: int = 12) -> Samples:
    if not series.is_split:
        raise ValueError("series must be split into dedicated/free first")
    T = series.n_intervals
    if window < 1:
        raise ValueError("window must be >= 1")
    t = np.arange(window, T)
    free = series.free.astype(np.float64)
    hist = np.stack([free[k - window:k] for k in t]) if t.size else np.zeros((0, window, series.n_grids))
    return Samples(t, hist, free[t], series.dedicated[t - 1].astype(np.float64))


def split_counts(n: int, ratios=(0.8, 0.1, 0.1)) -> tuple:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def split_dataset(series: DemandSeries, ratios=(0.8, 0.1, 0.1), window: int = 12) -> tuple:
    """Chronological train/val/test split of the windowed samples."""
    samples = make_samples(series, window)
    if len(samples) < 3:
        raise ValueError(f"series of {series.n_intervals} intervals is shorter than window + 3")
    a, b, _ = split_counts(len(samples), ratios)
    idx = np.arange(len(samples))
    return samples.subset(idx[:a]), samples.subset(idx[a:a + b]), samples.subset(idx[a + b:])


@dataclass(eq=False)
class ExperimentData:
    grid: HexGrid
    series: DemandSeries  # experiment window only
    target: np.ndarray  # (96, N)
    travel_time: np.ndarray
    cost: np.ndarray
    train: Samples
    val: Samples
    test: Samples

    def target_at(self, t) -> np.ndarray:
        return self.target[np.asarray(t) % INTERVALS_PER_DAY]


def make_experiment_data(
    rows: int = 4,
    cols: int = 4,
    days: int = 14,
    gamma: float = 0.6,
    seed: int = 0,
    target: str = "uniform",
    window: int = 12,
    mean_level: float = 8.0,
    speed_kmh: float = 20.0,
    unit_cost: float = 1.0,
    ratios=(0.8, 0.1, 0.1),
) -> ExperimentData:
    """Grid, a base week plus ``days`` of demand, targets and the three splits."""
    grid = make_hex_grid(rows, cols)
    full = split_fleet(synth_demand(grid, days + 7, seed, mean_level=mean_level), gamma, seed + 1)
    tgt = gen_target(TargetSpec(target, seed=seed + 2), base_week_mean(full, 0), grid)
    series = full.days(7, 7 + days)
    train, val, test = split_dataset(series, ratios, window)
    return ExperimentData(
        grid,
        series,
        tgt,
        travel_time_matrix(grid, speed_kmh),
        incentive_cost_matrix(grid, unit_cost),
        train,
        val,
        test,
    )
