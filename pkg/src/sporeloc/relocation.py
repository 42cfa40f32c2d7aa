"""Relocation instance, vectorization and the aggregation identities.

Flows ``x[i, j]`` (origin ``i`` -> destination ``j``) are flattened in
origin-major order, ``y = (x11, x12, ..., x1N, x21, ..., xNN)``.  This order is
part of the stable interface (JSON files and CLI reports use it).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .qp_core import StandardQP


class InstanceError(ValueError):
    """Relocation data violating the instance invariants."""

    def __init__(self, field: str, detail: str):
        super().__init__(f"{field}: {detail}")
        self.field = field


@dataclass(frozen=True, eq=False)
class RelocationInstance:
    """One time-step relocation problem.

    ``supply`` is the current dedicated-vehicle distribution, ``target`` the
    all-vehicle target for the next interval, ``travel_time`` in minutes,
    ``cost`` the incentive per relocated vehicle, ``budget`` the total
    incentive budget and ``interval`` the step length in minutes.
    """

    supply: np.ndarray
    target: np.ndarray
    travel_time: np.ndarray
    cost: np.ndarray
    budget: float
    interval: float = 15.0

    def __post_init__(self):
        supply = _vector("supply", self.supply)
        n = supply.size
        target = _vector("target", self.target)
        if target.size != n:
            raise InstanceError("target", f"length {target.size}, expected {n}")
        tt = _matrix("travel_time", self.travel_time, n)
        cost = _matrix("cost", self.cost, n)
        if np.any(supply < 0):
            raise InstanceError("supply", "must be nonnegative")
        if np.any(tt < 0):
            raise InstanceError("travel_time", "must be nonnegative")
        if np.any(np.diag(tt) != 0):
            raise InstanceError("travel_time", "diagonal must be zero")
        if np.any(cost < 0):
            raise InstanceError("cost", "must be nonnegative")
        try:
            budget = float(self.budget)
            interval = float(self.interval)
        except (TypeError, ValueError) as exc:
            raise InstanceError("budget", "budget and interval must be numbers") from exc
        if not np.isfinite(budget) or budget < 0:
            raise InstanceError("budget", "must be a finite nonnegative number")
        if not np.isfinite(interval) or interval <= 0:
            raise InstanceError("interval", "must be positive")
        object.__setattr__(self, "supply", supply)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "travel_time", tt)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "budget", budget)
        object.__setattr__(self, "interval", interval)

    @property
    def n_grids(self) -> int:
        return self.supply.size

    def to_dict(self) -> dict:
        return {
            "n_grids": self.n_grids,
            "supply": self.supply.tolist(),
            "target": self.target.tolist(),
            "travel_time": self.travel_time.tolist(),
            "cost": self.cost.tolist(),
            "budget": self.budget,
            "interval": self.interval,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RelocationInstance":
        if not isinstance(data, dict):
            raise InstanceError("<root>", "expected a JSON object")
        for key in ("supply", "target", "travel_time", "cost", "budget"):
            if key not in data:
                raise InstanceError(key, "missing")
        inst = cls(
            supply=data["supply"],
            target=data["target"],
            travel_time=data["travel_time"],
            cost=data["cost"],
            budget=data["budget"],
            interval=data.get("interval", 15.0),
        )
        if "n_grids" in data and int(data["n_grids"]) != inst.n_grids:
            raise InstanceError("n_grids", f"says {data['n_grids']} but supply has {inst.n_grids}")
        return inst

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "RelocationInstance":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InstanceError("<json>", str(exc)) from exc
        return cls.from_dict(data)


def _vector(name, value) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InstanceError(name, "not a numeric vector") from exc
    if arr.ndim != 1 or arr.size == 0:
        raise InstanceError(name, f"expected a nonempty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InstanceError(name, "non-finite entries")
    return arr


def _matrix(name, value, n) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InstanceError(name, "not a numeric matrix") from exc
    if arr.shape != (n, n):
        raise InstanceError(name, f"expected shape {(n, n)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InstanceError(name, "non-finite entries")
    return arr


# -- vectorization -----------------------------------------------------------


def flatten(x: np.ndarray) -> np.ndarray:
    """N x N flow matrix -> origin-major vector of length N^2."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {x.shape}")
    return x.reshape(-1).copy()


def unflatten(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    n = grid_count(y.size)
    return y.reshape(n, n).copy()


def grid_count(n_flow: int) -> int:
    n = int(round(np.sqrt(n_flow)))
    if n * n != n_flow or n_flow == 0:
        raise ValueError(f"flow vector length {n_flow} is not a perfect square")
    return n


@lru_cache(maxsize=16)
def _arrivals(n: int) -> sp.csr_matrix:
    cols = np.arange(n * n)
    return sp.csr_matrix((np.ones(n * n), (cols % n, cols)), shape=(n, n * n))


@lru_cache(maxsize=16)
def _departures(n: int) -> sp.csr_matrix:
    cols = np.arange(n * n)
    return sp.csr_matrix((np.ones(n * n), (cols // n, cols)), shape=(n, n * n))


def build_sparse_A(n_grids: int) -> sp.csr_matrix:
    """Arrival aggregator: ``(A y)_j = sum_i x_ij``."""
    if n_grids < 1:
        raise ValueError("n_grids must be >= 1")
    return _arrivals(int(n_grids)).copy()


def build_sparse_B(n_grids: int) -> sp.csr_matrix:
    """Departure aggregator: ``(B y)_i = sum_j x_ij``."""
    if n_grids < 1:
        raise ValueError("n_grids must be >= 1")
    return _departures(int(n_grids)).copy()


def required_dv_distribution(target, predicted_free) -> np.ndarray:
    """Dedicated vehicles still needed per grid; negative entries are kept."""
    target = np.asarray(target, dtype=np.float64)
    predicted_free = np.asarray(predicted_free, dtype=np.float64)
    if target.shape != predicted_free.shape:
        raise ValueError(f"length mismatch: {target.shape} vs {predicted_free.shape}")
    return target - predicted_free


def linear_cost(required_dv) -> np.ndarray:
    """``q = -A' D_c`` for the given required dedicated distribution."""
    required_dv = np.asarray(required_dv, dtype=np.float64)
    n = required_dv.shape[0]
    return -(_arrivals(n).T @ required_dv)


def constraint_rhs(supply, budget: float) -> tuple:
    supply = np.asarray(supply, dtype=np.float64)
    n = supply.size
    return (supply.copy(), np.zeros(n * n), np.array([float(budget)]), np.zeros(n * n))


def to_standard_qp(inst: RelocationInstance, required_dv) -> StandardQP:
    """Vectorized QP for one instance and one required-DV vector."""
    n = inst.n_grids
    required_dv = np.asarray(required_dv, dtype=np.float64)
    if required_dv.shape != (n,):
        raise ValueError(f"required_dv has shape {required_dv.shape}, expected {(n,)}")
    A = _arrivals(n)
    G = (
        _departures(n),
        sp.diags(flatten(inst.travel_time) - inst.interval, format="csr"),
        sp.csr_matrix(flatten(inst.cost)[None, :]),
        -sp.identity(n * n, format="csr"),
    )
    return StandardQP(
        P=(A.T @ A).tocsr(),
        q=linear_cost(required_dv),
        G=G,
        h=constraint_rhs(inst.supply, inst.budget),
        offset=0.5 * float(required_dv @ required_dv),
    )


def relocation_objective(x: np.ndarray, required_dv) -> float:
    """Direct double-sum objective ``0.5 sum_j (sum_i x_ij - D_c,j)^2``."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * float(np.sum((x.sum(axis=0) - np.asarray(required_dv)) ** 2))


def aggregate_arrivals(y) -> np.ndarray:
    """Dedicated vehicles arriving in each grid, ``A y``."""
    y = np.asarray(y, dtype=np.float64)
    n = grid_count(y.shape[0])
    return _arrivals(n) @ y


def matching_distribution(dv, free) -> np.ndarray:
    dv = np.asarray(dv, dtype=np.float64)
    free = np.asarray(free, dtype=np.float64)
    if dv.shape != free.shape:
        raise ValueError(f"length mismatch: {dv.shape} vs {free.shape}")
    return dv + free


def plan_violations(inst: RelocationInstance, y) -> dict:
    """Worst violation of each constraint family for a flow plan (0 if satisfied).

    Supply, time and nonnegativity are in vehicles; budget in cost units.
    """
    x = unflatten(y)
    infeasible_arc = inst.travel_time > inst.interval
    return {
        "supply": float(max(0.0, (x.sum(axis=1) - inst.supply).max())),
        "time": float(max(0.0, x[infeasible_arc].max(initial=0.0))),
        "budget": float(max(0.0, np.sum(inst.cost * x) - inst.budget)),
        "nonnegativity": float(max(0.0, -x.min())),
    }
