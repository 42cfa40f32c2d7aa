"""Differentiable ADMM layer for the four-block QP.

Forward pass (one sweep, all four blocks at once)::

    y   <- M^{-1} ( -(q + sum G_n'(rho (s_n - h_n) + mu_n)) )
    s_n <- max(0, -mu_n / rho - (G_n y - h_n))
    mu_n <- mu_n + rho (G_n y + s_n - h_n)

iterated until the objective ``Z1 = 0.5 y'Py + q'y`` changes by less than
``xi`` between sweeps.  Derivatives with respect to the parameter ``theta``
(which enters only through ``q``) are propagated through the very same
sweeps, either forward (``solve_with_gradients``) or in reverse through a
recorded tape of ReLU masks (``BatchSolution.vjp``).

The block-wise functions (``primal_update``, ``slack_update`` ...) are the
readable reference; the solvers run the fused kernels in ``_kernels``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from ._kernels import SparseOps
from .qp_core import (
    KKTReport,
    PenaltySystem,
    StandardQP,
    assemble_penalty_system,
    kkt_residuals,
    row_equilibration,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdmmConfig:
    """Penalty ``rho``, stopping threshold ``xi`` on the objective change and
    the sweep cap ``k_max``.

    ``equilibrate`` rescales every constraint row to unit norm before
    iterating (same feasible set, far fewer sweeps).  ``backend`` picks the
    kernel implementation; ``None`` follows the environment default.
    ``min_iter`` suppresses the stopping test before that many sweeps, so
    ``min_iter = k_max`` runs a fixed number of sweeps.
    """

    rho: float = 2.0
    xi: float = 0.05
    k_max: int = 2000
    equilibrate: bool = True
    backend: str | None = None
    min_iter: int = 0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if not self.xi > 0:
            raise ValueError(f"xi must be > 0, got {self.xi}")
        if int(self.k_max) < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")
        if int(self.min_iter) < 0:
            raise ValueError(f"min_iter must be >= 0, got {self.min_iter}")


@dataclass
class AdmmState:
    y: np.ndarray
    s: tuple
    mu: tuple
    k: int = 0
    z: float = 0.0


@dataclass
class JacobianState:
    J_y: np.ndarray
    J_s: tuple
    J_mu: tuple


# -- block-wise reference updates ---------------------------------------------


def init_state(qp: StandardQP) -> AdmmState:
    return AdmmState(
        y=np.zeros(qp.n_flow),
        s=tuple(np.maximum(h, 0.0) for h in qp.h),
        mu=tuple(np.zeros_like(h) for h in qp.h),
    )


def init_jacobian(qp: StandardQP, n_params: int) -> JacobianState:
    return JacobianState(
        J_y=np.zeros((qp.n_flow, n_params)),
        J_s=tuple(np.zeros((k, n_params)) for k in qp.block_sizes),
        J_mu=tuple(np.zeros((k, n_params)) for k in qp.block_sizes),
    )


def _check_state(state: AdmmState, qp: StandardQP):
    if state.y.shape != (qp.n_flow,):
        raise ValueError(f"y has shape {state.y.shape}, expected {(qp.n_flow,)}")
    for name, v, k in (("s", state.s, qp.block_sizes), ("mu", state.mu, qp.block_sizes)):
        if tuple(np.size(b) for b in v) != tuple(k):
            raise ValueError(f"{name} block sizes {[np.size(b) for b in v]} != {list(k)}")


def primal_update(state: AdmmState, system: PenaltySystem, qp: StandardQP) -> np.ndarray:
    """Minimizer of the augmented Lagrangian in ``y`` for the current ``s``, ``mu``."""
    _check_state(state, qp)
    if system.n != qp.n_flow:
        raise ValueError(f"system is {system.n}-dimensional, QP has {qp.n_flow} flows")
    rho = system.rho
    rhs = qp.q.copy()
    for g, h, s, mu in zip(qp.G, qp.h, state.s, state.mu):
        rhs += g.T @ (rho * (s - h) + mu)
    return system.solve(-rhs)


def slack_update(state: AdmmState, qp: StandardQP, rho: float) -> tuple:
    """ReLU slack step; ``state.y`` must already hold the new primal iterate."""
    return tuple(
        np.maximum(0.0, -mu / rho - (g @ state.y - h))
        for g, h, mu in zip(qp.G, qp.h, state.mu)
    )


def dual_update(state: AdmmState, qp: StandardQP, rho: float) -> tuple:
    """Dual ascent; ``state.y`` and ``state.s`` must hold the new iterates."""
    return tuple(
        mu + rho * (g @ state.y + s - h)
        for g, h, s, mu in zip(qp.G, qp.h, state.s, state.mu)
    )


def admm_step(state: AdmmState, system: PenaltySystem, qp: StandardQP) -> AdmmState:
    rho = system.rho
    st = replace(state, y=primal_update(state, system, qp))
    st = replace(st, s=slack_update(st, qp, rho))
    st = replace(st, mu=dual_update(st, qp, rho))
    return replace(st, k=state.k + 1, z=qp.objective(st.y))


def jacobian_step(
    jstate: JacobianState,
    state: AdmmState,
    qp: StandardQP,
    system: PenaltySystem,
    dq_dtheta,
) -> JacobianState:
    """Advance the parameter Jacobians by one sweep.

    ``jstate`` holds the Jacobians at sweep ``k``; ``state`` is the forward
    state *after* sweep ``k + 1`` (its slacks define the ReLU mask).
    """
    rho = system.rho
    dq = np.asarray(dq_dtheta.toarray() if hasattr(dq_dtheta, "toarray") else dq_dtheta, dtype=np.float64)
    if dq.shape != jstate.J_y.shape:
        raise ValueError(f"dq_dtheta has shape {dq.shape}, expected {jstate.J_y.shape}")
    rhs = dq.copy()
    for g, js, jmu in zip(qp.G, jstate.J_s, jstate.J_mu):
        rhs += g.T @ (rho * js + jmu)
    J_y = system.solve(-rhs)
    J_s, J_mu = [], []
    for g, s, jmu in zip(qp.G, state.s, jstate.J_mu):
        gj = g @ J_y
        mask = (np.atleast_1d(s) > 0.0)[:, None]
        js = np.where(mask, -(jmu + rho * gj) / rho, 0.0)
        J_s.append(js)
        J_mu.append(jmu + rho * (gj + js))
    return JacobianState(J_y, tuple(J_s), tuple(J_mu))


def chain_loss_gradient(dL_dy, J_y) -> np.ndarray:
    """``J_y' dL/dy``: loss gradient with respect to the layer parameter."""
    dL_dy = np.asarray(dL_dy, dtype=np.float64)
    J_y = np.asarray(J_y, dtype=np.float64)
    if J_y.ndim != 2 or dL_dy.shape != (J_y.shape[0],):
        raise ValueError(f"shape mismatch: dL_dy {dL_dy.shape}, J_y {J_y.shape}")
    return J_y.T @ dL_dy


# -- solver context and results -----------------------------------------------


class SolverContext:
    """Everything that depends only on ``(P, G, rho)``: row scaling,
    factorized penalty system and bound kernels.  Share it across samples
    that differ only in ``q`` and ``h``.
    """

    def __init__(self, qp: StandardQP, cfg: AdmmConfig | None = None):
        self.cfg = cfg or AdmmConfig()
        self.template = qp
        if self.cfg.equilibrate:
            self.row_scale = row_equilibration(qp)
            self.work = qp.row_scaled(self.row_scale)
        else:
            self.row_scale = np.ones(qp.n_rows)
            self.work = qp
        self.system = assemble_penalty_system(self.work, self.cfg.rho)
        self.ops = SparseOps(self.work.G_stacked, self.work.P, self.cfg.backend)

    @property
    def n(self) -> int:
        return self.template.n_flow

    @property
    def m(self) -> int:
        return self.template.n_rows

    def check(self, qp: StandardQP):
        if qp.n_flow != self.n or qp.block_sizes != self.template.block_sizes:
            raise ValueError("QP topology does not match the solver context")


@dataclass
class AdmmResult:
    y: np.ndarray
    s: tuple
    mu: tuple
    iterations: int
    converged: bool
    objective: float
    kkt: KKTReport

    @property
    def objective_z0(self) -> float:
        """Objective including the dropped constant (``Z0``)."""
        return self.objective


@dataclass
class GradientResult:
    y: np.ndarray
    J_y: np.ndarray
    iterations: int
    converged: bool
    objective: float
    kkt: KKTReport


def _forward(ctx: SolverContext, Q, H, record=False, jac=None):
    """Batched sweeps on the scaled problem. ``Q`` is (n, B), ``H`` is (m, B).

    Converged columns drop out; the working arrays are compacted only when
    the active set changes.
    """
    cfg, ops, system = ctx.cfg, ctx.ops, ctx.system
    rho = cfg.rho
    n, B = Q.shape
    m = H.shape[0]
    Y = np.zeros((n, B))
    S = np.maximum(H, 0.0)
    MU = np.zeros((m, B))
    z_prev = np.zeros(B)
    iters = np.zeros(B, dtype=np.int64)
    conv = np.zeros(B, dtype=bool)
    active = np.arange(B)
    q, h, s, mu, zp = Q, H, S.copy(), MU.copy(), z_prev.copy()
    y = Y
    tape = []
    if jac is not None:
        dQ, JY, JS, JMU = jac
        zero_h = np.zeros_like(JS)
    for k in range(1, int(cfg.k_max) + 1):
        y = system.solve(ops.primal_rhs(q, s, h, mu, rho))
        if jac is not None:
            JY[...] = system.solve(ops.primal_rhs(dQ, JS, zero_h, JMU, rho))
        mask = np.empty((m, active.size), dtype=np.bool_)
        ops.slack_dual(y, h, s, mu, rho, mask)
        if jac is not None:
            ops.jac_slack_dual(JY, mask[:, 0].copy(), JS, JMU, rho)
        z = ops.objective(q, y)
        if record:
            tape.append((active, mask))
        done = np.abs(z - zp) < cfg.xi
        if k < cfg.min_iter:
            done[:] = False
        zp = z
        iters[active] = k
        if done.any():
            Y[:, active], S[:, active], MU[:, active] = y, s, mu
            z_prev[active] = z
            conv[active[done]] = True
            keep = ~done
            active = active[keep]
            if active.size == 0:
                break
            q, h = np.ascontiguousarray(q[:, keep]), np.ascontiguousarray(h[:, keep])
            s, mu = np.ascontiguousarray(s[:, keep]), np.ascontiguousarray(mu[:, keep])
            zp = zp[keep]
            y = y[:, keep]
    if active.size:
        Y[:, active], S[:, active], MU[:, active] = y, s, mu
        z_prev[active] = zp
    return Y, S, MU, iters, conv, z_prev, tape


def _adjoint(ctx: SolverContext, tape, GY):
    """Reverse sweep through a recorded tape; returns dL/dq, shape (n, B)."""
    ops, system, rho = ctx.ops, ctx.system, ctx.cfg.rho
    n, B = GY.shape
    m = ctx.m
    YBAR = np.array(GY, dtype=np.float64, order="C")
    SBAR = np.zeros((m, B))
    MUBAR = np.zeros((m, B))
    QBAR = np.zeros((n, B))
    cur = None
    for active, mask in reversed(tape):
        if active is not cur:
            if cur is not None:
                SBAR[:, cur], MUBAR[:, cur], QBAR[:, cur] = sbar, mubar, qbar
            cur = active
            ybar = np.ascontiguousarray(YBAR[:, active])
            YBAR[:, active] = 0.0
            sbar = np.ascontiguousarray(SBAR[:, active])
            mubar = np.ascontiguousarray(MUBAR[:, active])
            qbar = np.ascontiguousarray(QBAR[:, active])
        z = -system.solve(ops.adjoint_ytot(ybar, sbar, mubar, mask, rho))
        ops.adjoint_update(z, mask, sbar, mubar, rho)
        qbar += z
        ybar[...] = 0.0
    if cur is not None:
        QBAR[:, cur] = qbar
    return QBAR


def _unscale(ctx: SolverContext, S, MU):
    d = ctx.row_scale[:, None] if S.ndim == 2 else ctx.row_scale
    return S / d, MU * d


def solve(qp: StandardQP, cfg: AdmmConfig | None = None, context: SolverContext | None = None) -> AdmmResult:
    """Run ADMM sweeps until ``|Z_{k+1} - Z_k| < xi`` or ``k_max``.

    Hitting ``k_max`` is not an error: the last iterate is returned with
    ``converged=False``.
    """
    ctx = context or SolverContext(qp, cfg)
    ctx.check(qp)
    Q = qp.q[:, None].copy()
    H = (ctx.row_scale * qp.h_stacked)[:, None].copy()
    Y, S, MU, iters, conv, z, _ = _forward(ctx, Q, H)
    return _result(ctx, qp, Y[:, 0], S[:, 0], MU[:, 0], iters[0], conv[0])


def _result(ctx, qp, y, s, mu, iters, conv) -> AdmmResult:
    s, mu = _unscale(ctx, s, mu)
    s_b, mu_b = qp.split(s), qp.split(mu)
    if not conv:
        log.debug("ADMM hit k_max=%d without meeting xi=%g", ctx.cfg.k_max, ctx.cfg.xi)
    return AdmmResult(
        y=y.copy(),
        s=s_b,
        mu=mu_b,
        iterations=int(iters),
        converged=bool(conv),
        objective=qp.objective(y),
        kkt=kkt_residuals(qp, y, s_b, mu_b),
    )


def solve_with_gradients(
    qp: StandardQP,
    cfg: AdmmConfig | None = None,
    dq_dtheta=None,
    context: SolverContext | None = None,
) -> GradientResult:
    """Forward sweeps plus forward-mode Jacobian ``dy/dtheta`` in lockstep.

    ``dq_dtheta`` is the (N^2 x p) derivative of ``q`` with respect to the
    parameter; for the relocation layer it is ``A'``.
    """
    ctx = context or SolverContext(qp, cfg)
    ctx.check(qp)
    if dq_dtheta is None:
        raise ValueError("dq_dtheta is required")
    dQ = dq_dtheta.toarray() if hasattr(dq_dtheta, "toarray") else np.asarray(dq_dtheta, dtype=np.float64)
    dQ = np.ascontiguousarray(dQ, dtype=np.float64)
    if dQ.ndim != 2 or dQ.shape[0] != ctx.n:
        raise ValueError(f"dq_dtheta has shape {dQ.shape}, expected ({ctx.n}, p)")
    p = dQ.shape[1]
    JY = np.zeros((ctx.n, p))
    JS = np.zeros((ctx.m, p))
    JMU = np.zeros((ctx.m, p))
    Q = qp.q[:, None].copy()
    H = (ctx.row_scale * qp.h_stacked)[:, None].copy()
    Y, S, MU, iters, conv, z, _ = _forward(ctx, Q, H, jac=(dQ, JY, JS, JMU))
    res = _result(ctx, qp, Y[:, 0], S[:, 0], MU[:, 0], iters[0], conv[0])
    return GradientResult(res.y, JY, res.iterations, res.converged, res.objective, res.kkt)


@dataclass
class BatchSolution:
    """Solutions of a batch sharing one topology, with a reverse-mode tape."""

    Y: np.ndarray  # (B, n)
    S: np.ndarray  # (B, m), original units
    MU: np.ndarray  # (B, m), original units
    iterations: np.ndarray
    converged: np.ndarray
    objective: np.ndarray
    context: SolverContext
    _tape: list | None = None

    def vjp(self, grad_y) -> np.ndarray:
        """Gradient with respect to ``q`` for per-sample upstream ``dL/dy`` (B, n)."""
        if self._tape is None:
            raise RuntimeError("solve_batch was called with record=False")
        grad_y = np.asarray(grad_y, dtype=np.float64)
        if grad_y.shape != self.Y.shape:
            raise ValueError(f"grad_y has shape {grad_y.shape}, expected {self.Y.shape}")
        return _adjoint(self.context, self._tape, np.ascontiguousarray(grad_y.T)).T.copy()


def solve_batch(context: SolverContext, q, h, record: bool = False) -> BatchSolution:
    """Solve ``B`` QPs that share ``(P, G, rho)``.

    ``q`` is (B, n); ``h`` is (B, m) stacked right-hand sides in original
    units.  Each sample follows its own stopping rule, so results equal
    single solves.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if q.shape[1] != context.n or h.shape != (q.shape[0], context.m):
        raise ValueError(f"bad batch shapes q {q.shape}, h {h.shape}")
    Q = np.ascontiguousarray(q.T)
    H = np.ascontiguousarray((h * context.row_scale).T)
    Y, S, MU, iters, conv, z, tape = _forward(context, Q, H, record=record)
    S, MU = _unscale(context, S, MU)
    return BatchSolution(
        Y=Y.T.copy(),
        S=S.T.copy(),
        MU=MU.T.copy(),
        iterations=iters,
        converged=conv,
        objective=z,
        context=context,
        _tape=tape if record else None,
    )
