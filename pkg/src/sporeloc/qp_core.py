"""Standardized four-block QP and the shared penalty system.

The relocation problem is carried around as::

    min_y  0.5 y'Py + q'y   s.t.  G_n y <= h_n,  n = 1..4

with block row dimensions ``(N, N^2, 1, N^2)``.  Every ADMM iteration solves a
linear system with the same matrix ``M = P + rho * sum_n G_n'G_n``; it is
factorized once (Cholesky) and reused.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import lapack

BLOCK_NAMES = ("supply", "time", "budget", "nonnegativity")


class QPError(ValueError):
    """Malformed QP data."""


class FactorizationError(QPError):
    """The penalty matrix could not be Cholesky-factorized."""

    def __init__(self, matrix: str, detail: str):
        super().__init__(f"{matrix}: {detail}")
        self.matrix = matrix


def _as_csr(mat) -> sp.csr_matrix:
    if sp.issparse(mat):
        return sp.csr_matrix(mat, dtype=np.float64)
    return sp.csr_matrix(np.atleast_2d(np.asarray(mat, dtype=np.float64)))


@dataclass(frozen=True, eq=False)
class StandardQP:
    """``min 0.5 y'Py + q'y`` subject to four inequality blocks.

    ``offset`` is the constant dropped from the objective (for the relocation
    problem ``Z0 = Z1 + offset``).
    """

    P: sp.csr_matrix
    q: np.ndarray
    G: tuple
    h: tuple
    offset: float = 0.0

    def __post_init__(self):
        P = _as_csr(self.P)
        q = np.asarray(self.q, dtype=np.float64).ravel()
        if len(self.G) != 4 or len(self.h) != 4:
            raise QPError("expected exactly four constraint blocks")
        G = tuple(_as_csr(g) for g in self.G)
        h = tuple(np.atleast_1d(np.asarray(v, dtype=np.float64)).ravel() for v in self.h)
        n = q.size
        if P.shape != (n, n):
            raise QPError(f"P has shape {P.shape}, expected {(n, n)}")
        for name, g, v in zip(BLOCK_NAMES, G, h):
            if g.shape[1] != n:
                raise QPError(f"G[{name}] has {g.shape[1]} columns, expected {n}")
            if g.shape[0] != v.size:
                raise QPError(f"h[{name}] has length {v.size}, G[{name}] has {g.shape[0]} rows")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)

    @property
    def n_flow(self) -> int:
        return self.q.size

    @property
    def block_sizes(self) -> tuple:
        return tuple(g.shape[0] for g in self.G)

    @cached_property
    def block_slices(self) -> tuple:
        out, start = [], 0
        for size in self.block_sizes:
            out.append(slice(start, start + size))
            start += size
        return tuple(out)

    @property
    def n_rows(self) -> int:
        return sum(self.block_sizes)

    @cached_property
    def G_stacked(self) -> sp.csr_matrix:
        return sp.vstack(self.G, format="csr")

    @cached_property
    def h_stacked(self) -> np.ndarray:
        return np.concatenate(self.h)

    def split(self, v: np.ndarray) -> tuple:
        """Split a stacked row vector (or row-stacked matrix) into the four blocks."""
        return tuple(v[s] for s in self.block_slices)

    def objective(self, y: np.ndarray) -> float:
        y = np.asarray(y, dtype=np.float64)
        return float(0.5 * y @ (self.P @ y) + self.q @ y)

    def with_linear(self, q=None, h=None) -> "StandardQP":
        """Same matrices, new ``q`` and/or ``h`` (h as four blocks or stacked)."""
        if h is not None and not isinstance(h, tuple):
            h = self.split(np.asarray(h, dtype=np.float64))
        return StandardQP(
            self.P,
            self.q if q is None else q,
            self.G,
            self.h if h is None else h,
            self.offset,
        )

    def row_scaled(self, scale: np.ndarray) -> "StandardQP":
        """Equivalent QP with constraint row ``i`` multiplied by ``scale[i] > 0``."""
        parts = self.split(np.asarray(scale, dtype=np.float64))
        G = tuple(sp.diags(d) @ g for d, g in zip(parts, self.G))
        h = tuple(d * v for d, v in zip(parts, self.h))
        return StandardQP(self.P, self.q, G, h, self.offset)


def row_equilibration(qp: StandardQP) -> np.ndarray:
    """Per-row factors that give every nonzero constraint row unit 2-norm."""
    G = qp.G_stacked
    norms = np.sqrt(np.asarray(G.multiply(G).sum(axis=1)).ravel())
    scale = np.ones_like(norms)
    nz = norms > 0
    scale[nz] = 1.0 / norms[nz]
    return scale


@dataclass(frozen=True, eq=False)
class PenaltySystem:
    """Cholesky factor of ``M = P + rho * sum_n G_n'G_n``.

    Read-only after construction, so one instance can serve any number of
    concurrent solves sharing the topology.
    """

    rho: float
    chol: np.ndarray = field(repr=False)  # lower factor, Fortran order
    matrix: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.chol.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Return ``M^{-1} rhs`` for a vector or an ``(n, B)`` block."""
        x, info = lapack.dpotrs(self.chol, rhs, lower=1)
        if info != 0:  # pragma: no cover - only on corrupted input
            raise FactorizationError("M", f"dpotrs failed with info={info}")
        return np.ascontiguousarray(x)


def penalty_matrix(qp: StandardQP, rho: float) -> np.ndarray:
    G = qp.G_stacked
    return (qp.P + rho * (G.T @ G)).toarray()


def assemble_penalty_system(qp: StandardQP, rho: float) -> PenaltySystem:
    """Factorize ``P + rho * sum G_n'G_n`` once for repeated solves."""
    if not np.isfinite(rho) or rho <= 0:
        raise QPError(f"rho must be positive, got {rho}")
    if not np.all(np.isfinite(qp.P.data)):
        raise FactorizationError("P", "contains non-finite entries")
    for name, g in zip(BLOCK_NAMES, qp.G):
        if not np.all(np.isfinite(g.data)):
            raise FactorizationError(f"G[{name}]", "contains non-finite entries")
    M = penalty_matrix(qp, rho)
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise FactorizationError("P", "penalty matrix is not symmetric (P must be symmetric)")
    try:
        L = sla.cholesky(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        # blame P if it is visibly indefinite, otherwise the constraints
        # failed to regularize a singular P
        culprit = "P" if qp.P.diagonal().min(initial=0.0) < 0 else "G"
        raise FactorizationError(
            culprit, f"P + rho*G'G is not positive definite ({exc})"
        ) from exc
    return PenaltySystem(float(rho), np.asfortranarray(L), M)


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    primal_infeasibility: float
    complementarity: float
    by_block: dict

    @property
    def worst(self) -> float:
        return max(self.stationarity, self.primal_infeasibility, self.complementarity)


def kkt_residuals(qp: StandardQP, y, s=None, mu=None) -> KKTReport:
    """Max-norm KKT residuals of ``(y, mu)`` for ``qp``.

    ``s`` is accepted for symmetry with the solver state but is not needed:
    every residual is defined through ``y`` and ``mu``.
    """
    y = np.asarray(y, dtype=np.float64)
    if mu is None:
        mu = tuple(np.zeros(k) for k in qp.block_sizes)
    mu = tuple(np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in mu)
    grad = qp.P @ y + qp.q
    by_block = {}
    infeas = comp = 0.0
    for name, g, h, m in zip(BLOCK_NAMES, qp.G, qp.h, mu):
        r = g @ y - h
        grad = grad + g.T @ m
        bi = float(np.maximum(r, 0.0).max(initial=0.0))
        bc = float(np.abs(m * r).max(initial=0.0))
        by_block[name] = {"primal_infeasibility": bi, "complementarity": bc}
        infeas = max(infeas, bi)
        comp = max(comp, bc)
    return KKTReport(float(np.abs(grad).max(initial=0.0)), infeas, comp, by_block)
