"""Finite-difference checks for the ADMM layer, the predictor and the full chain.

All checks report ``max|analytic - fd| / max(max|fd|, floor)``.  The layer
Jacobian ``dy/dtheta`` is measured in vehicles per vehicle, so its floor is
1; elsewhere the floor is 1e-12.

The objective only sees arrivals ``A y``, so it can sit still while flows
are still being reassigned between origins.  Checks therefore run with a
vanishing ``xi``: the sweep count is then set by ``k_max`` or an exactly
repeated objective, and is the same for every perturbed input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .admm_layer import AdmmConfig, SolverContext, solve, solve_batch, solve_with_gradients
from .predictor import LAYERS, Adjacency, init_weights, predictor_vjp, predict
from .relocation import RelocationInstance, build_sparse_A, to_standard_qp

log = logging.getLogger(__name__)

FIXED_SWEEPS = AdmmConfig(xi=1e-300, k_max=3000)


def relative_error(analytic, reference, floor: float = 1e-12) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    return float(np.abs(analytic - reference).max() / max(np.abs(reference).max(), floor))


def central_difference(f, x, step: float) -> np.ndarray:
    """Jacobian of vector-valued ``f`` at ``x`` by central differences, (len f, len x)."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * step))
    return np.stack(cols, axis=-1)


def random_instance(rng: np.random.Generator, n: int, interval: float = 15.0):
    """Random instance and predicted-free vector with mixed active constraints."""
    tt = rng.uniform(0.0, 1.6 * interval, (n, n))
    tt = 0.5 * (tt + tt.T)
    np.fill_diagonal(tt, 0.0)
    cost = rng.integers(1, 5, (n, n)).astype(float)
    np.fill_diagonal(cost, 0.0)
    supply = rng.integers(0, 12, n).astype(float)
    target = rng.integers(0, 20, n).astype(float)
    free = rng.uniform(0.0, 10.0, n)
    budget = float(rng.uniform(0.2, 1.0) * supply.sum() * 2.0)
    return RelocationInstance(supply, target, tt, cost, budget, interval), free


def slack_margin(qp, cfg: AdmmConfig) -> float:
    """Smallest distance of the converged ReLU arguments from the kink.

    For every constraint row the slack is either clearly positive or its
    pre-clamp value is clearly negative when this is large.
    """
    ctx = SolverContext(qp, cfg)
    sol = solve_batch(ctx, qp.q[None], qp.h_stacked[None])
    d = ctx.row_scale
    y = sol.Y[0]
    s = sol.S[0] * d
    mu = sol.MU[0] / d
    pre = -mu / cfg.rho - d * (qp.G_stacked @ y - qp.h_stacked)
    return float(np.min(np.where(s > 0, s, -pre)))


@dataclass
class JacobianCheck:
    rel_error: float
    iterations: int
    margin: float


def check_layer_jacobian(inst: RelocationInstance, free, cfg: AdmmConfig = FIXED_SWEEPS, step: float = 1e-4) -> JacobianCheck:
    """``dy/dtheta`` from the unrolled forward recursion versus central differences."""
    n = inst.n_grids
    A = build_sparse_A(n)
    theta0 = np.asarray(free, dtype=np.float64)
    qp = to_standard_qp(inst, inst.target - theta0)
    ctx = SolverContext(qp, cfg)
    res = solve_with_gradients(qp, cfg, A.T, context=ctx)

    def y_of(theta):
        return solve(qp.with_linear(q=-(A.T @ (inst.target - theta))), cfg, context=ctx).y

    fd = central_difference(y_of, theta0, step)
    return JacobianCheck(relative_error(res.J_y, fd, floor=1.0), res.iterations, slack_margin(qp, cfg))


def nondegenerate_instances(count: int, n: int, seed: int, cfg: AdmmConfig = FIXED_SWEEPS, margin: float = 1e-3, max_tries: int = 2000):
    """First ``count`` random instances whose converged point is away from every kink."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(max_tries):
        inst, free = random_instance(rng, n)
        qp = to_standard_qp(inst, inst.target - free)
        if slack_margin(qp, cfg) > margin:
            out.append((inst, free))
            if len(out) == count:
                break
    if len(out) < count:
        log.warning("found only %d of %d non-degenerate instances", len(out), count)
    return out


def check_predictor(seed: int = 0, n_grids: int = 4, window: int = 6, hidden: int = 4, step: float = 1e-6) -> float:
    """Predictor weight gradient versus central differences on a random model."""
    rng = np.random.default_rng(seed)
    adj = Adjacency([[j for j in (i - 1, i + 1) if 0 <= j < n_grids] for i in range(n_grids)])
    for attempt in range(100):
        w = init_weights(window, hidden, seed + attempt, input_scale=0.3)
        hist = rng.uniform(0.0, 10.0, (3, window, n_grids))
        if np.any(predict(hist, adj, w) > 0):
            break
    up = rng.normal(size=(3, n_grids))
    g = predictor_vjp(hist, adj, w, up)
    flat = np.concatenate([g[k].ravel() for k in LAYERS])
    fd = central_difference(lambda v: np.sum(up * predict(hist, adj, w.with_flat(v))), w.flat(), step)
    return relative_error(flat, fd)


def check_end_to_end(seed: int = 0, n_samples: int = 3, step: float = 1e-5, cfg: AdmmConfig = FIXED_SWEEPS) -> float:
    """``dL_SPO/dw`` through predictor and relocation layer on a two-grid toy set."""
    from .spo import RelocationLayer, SpoConfig, batch_loss_and_grad

    rng = np.random.default_rng(seed)
    window, hidden = 4, 3
    adj = Adjacency([[1], [0]])
    tt = np.array([[0.0, 5.0], [5.0, 0.0]])
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    layer = RelocationLayer(tt, cost, budget=3.0, admm=cfg)
    hist = rng.uniform(1.0, 8.0, (n_samples, window, 2))
    truth = rng.uniform(1.0, 8.0, (n_samples, 2))
    supply = rng.integers(2, 8, (n_samples, 2)).astype(float)
    target = rng.uniform(4.0, 16.0, (n_samples, 2))
    scfg = SpoConfig(w1=1.0, w2=1.0)
    w = init_weights(window, hidden, seed, input_scale=0.2)
    ev = batch_loss_and_grad(w, adj, layer, hist, truth, supply, target, scfg)
    flat = np.concatenate([ev.grads[k].ravel() for k in LAYERS])

    def loss(v):
        return batch_loss_and_grad(w.with_flat(v), adj, layer, hist, truth, supply, target, scfg, need_grad=False).loss

    fd = central_difference(loss, w.flat(), step)
    return relative_error(flat, fd)
