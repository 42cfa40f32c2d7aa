"""End-to-end training of the predictor through the relocation layer.

Per sample, with forecast ``theta = predict(history)``::

    y   = argmin 0.5 ||A y - (T - theta)||^2  s.t. relocation constraints
    D_a = A y + D_f                  # matched distribution (actual free vehicles)
    L1  = ||D_f - theta||^2,  L2 = ||T - D_a||^2,  L = w1 L1 + w2 L2

``dL/dtheta = 2 w1 (theta - D_f) + A qbar`` where ``qbar`` is the reverse
pass of the unrolled ADMM sweeps seeded with ``w2 A'(2 (D_a - T))``.
Batches average the per-sample loss.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics as mt
from .admm_layer import AdmmConfig, SolverContext, solve_batch
from .datagen import ExperimentData, Samples
from .predictor import (
    LAYERS,
    Adjacency,
    PredictorWeights,
    init_weights,
    persistence_predict,
    predict,
    predictor_vjp,
)
from .relocation import RelocationInstance, build_sparse_A, plan_violations, to_standard_qp

log = logging.getLogger(__name__)

REGIMES = ("SPO", "PTO", "NOP", "DON")
ON_NONCONVERGENCE = ("accept", "skip")


@dataclass(frozen=True)
class SpoConfig:
    w1: float = 1.0
    w2: float = 1.0
    learning_rate: float = 0.01
    weight_decay: float = 0.001
    batch_size: int = 64
    epochs: int = 20
    hidden: int = 16
    window: int = 12
    seed: int = 0
    on_nonconvergence: str = "accept"

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or (self.w1 == 0 and self.w2 == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.on_nonconvergence not in ON_NONCONVERGENCE:
            raise ValueError(f"on_nonconvergence must be one of {ON_NONCONVERGENCE}")


def matching_loss(target, matched) -> float:
    target = np.asarray(target, dtype=np.float64)
    matched = np.asarray(matched, dtype=np.float64)
    if target.shape != matched.shape:
        raise ValueError(f"length mismatch: {target.shape} vs {matched.shape}")
    return float(np.sum((target - matched) ** 2))


def spo_loss(l1: float, l2: float, cfg: SpoConfig) -> float:
    return cfg.w1 * l1 + cfg.w2 * l2


class RelocationLayer:
    """Shared-topology relocation QP for every interval of one city."""

    def __init__(self, travel_time, cost, budget: float, admm: AdmmConfig, interval: float = 15.0):
        n = np.asarray(travel_time).shape[0]
        self.template = RelocationInstance(np.zeros(n), np.zeros(n), travel_time, cost, budget, interval)
        self.qp = to_standard_qp(self.template, np.zeros(n))
        self.context = SolverContext(self.qp, admm)
        self.A = build_sparse_A(n)
        self.n_grids = n
        self.budget = float(budget)

    def linear_terms(self, theta, target, supply):
        """Per-sample ``q`` (B, N^2) and stacked ``h`` (B, m)."""
        theta = np.atleast_2d(theta)
        required = np.atleast_2d(target) - theta
        q = -(required @ self.A)
        B, N = theta.shape
        h = np.zeros((B, self.qp.n_rows))
        sl = self.qp.block_slices
        h[:, sl[0]] = np.atleast_2d(supply)
        h[:, sl[2]] = self.budget
        return q, h

    def solve(self, theta, target, supply, record: bool = False):
        q, h = self.linear_terms(theta, target, supply)
        return solve_batch(self.context, q, h, record=record)

    def arrivals(self, Y) -> np.ndarray:
        return np.asarray(Y @ self.A.T)

    def instance(self, supply, target) -> RelocationInstance:
        t = self.template
        return RelocationInstance(supply, target, t.travel_time, t.cost, t.budget, t.interval)


@dataclass
class BatchEval:
    loss: float
    l1: float
    l2: float
    grads: dict
    iterations: float
    nonconverged: int


def batch_loss_and_grad(
    w: PredictorWeights,
    adj: Adjacency,
    layer: RelocationLayer | None,
    hist,
    truth,
    supply,
    target,
    cfg: SpoConfig,
    need_grad: bool = True,
) -> BatchEval:
    """Mean ``L_SPO`` over a batch and its weight gradient.

    With ``w2 == 0`` no relocation problem is solved (the prediction-only path).
    """
    hist = np.asarray(hist, dtype=np.float64)
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    B = truth.shape[0]
    theta = predict(hist, adj, w)
    theta = np.atleast_2d(theta)
    l1_each = np.sum((truth - theta) ** 2, axis=1)
    d_theta = cfg.w1 * 2.0 * (theta - truth)
    keep = np.ones(B, dtype=bool)
    l2_each = np.full(B, np.nan)
    iters, nonconv = 0.0, 0
    if cfg.w2 > 0:
        if layer is None:
            raise ValueError("w2 > 0 needs a relocation layer")
        target = np.atleast_2d(target)
        sol = layer.solve(theta, target, supply, record=need_grad)
        iters = float(sol.iterations.mean())
        nonconv = int((~sol.converged).sum())
        if nonconv and cfg.on_nonconvergence == "skip":
            keep = sol.converged.copy()
        matched = layer.arrivals(sol.Y) + truth
        l2_each = np.sum((target - matched) ** 2, axis=1)
        if need_grad:
            g_y = cfg.w2 * (2.0 * (matched - target)) @ layer.A
            g_y[~keep] = 0.0
            d_theta = d_theta + np.asarray(sol.vjp(g_y) @ layer.A.T)
    n_keep = max(int(keep.sum()), 1)
    l1 = float(l1_each[keep].sum() / n_keep)
    l2 = float(l2_each[keep].sum() / n_keep) if cfg.w2 > 0 else float("nan")
    loss = cfg.w1 * l1 + (cfg.w2 * l2 if cfg.w2 > 0 else 0.0)
    grads = None
    if need_grad:
        d_theta[~keep] = 0.0
        grads = predictor_vjp(hist, adj, w, d_theta / n_keep)
    return BatchEval(loss, l1, l2, grads, iters, nonconv)


class Adagrad:
    """Per-coordinate adaptive steps with L2 weight decay added to the gradient."""

    def __init__(self, lr: float = 0.01, weight_decay: float = 0.0, eps: float = 1e-10):
        self.lr = lr
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = {}

    def step(self, w: PredictorWeights, grads: dict) -> None:
        for k in LAYERS:
            g = np.asarray(grads[k], dtype=np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * w.params[k]
            acc = self.state.setdefault(k, np.zeros_like(g))
            acc += g * g
            w.params[k] = w.params[k] - self.lr * g / (np.sqrt(acc) + self.eps)


@dataclass
class TrainRecord:
    epoch: list = field(default_factory=list)
    l1: list = field(default_factory=list)
    l2: list = field(default_factory=list)
    l_spo: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    val_smape: list = field(default_factory=list)
    mean_iterations: list = field(default_factory=list)
    nonconverged: list = field(default_factory=list)
    best_epoch: int = 0

    COLUMNS = ("epoch", "l1", "l2", "l_spo", "val_rmse", "val_smape", "val_loss", "mean_iterations", "nonconverged")

    def __len__(self) -> int:
        return len(self.epoch)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def _default_scale(samples: Samples) -> float:
    m = float(np.mean(samples.hist)) if len(samples) else 0.0
    return 1.0 / m if m > 0 else 1.0


def train_spo(
    data: ExperimentData,
    cfg: SpoConfig,
    admm: AdmmConfig,
    budget: float,
    eval_admm: AdmmConfig | None = None,
    weights: PredictorWeights | None = None,
):
    """Train through the relocation layer; returns best-validation weights and the record.

    Selection uses the validation ``L_SPO`` of the configured loss weights.
    """
    adj = Adjacency(data.grid.neighbors)
    train = data.train
    if len(train) == 0:
        raise ValueError("empty training split")
    w = weights.copy() if weights is not None else init_weights(
        cfg.window, cfg.hidden, cfg.seed, input_scale=_default_scale(train)
    )
    layer = RelocationLayer(data.travel_time, data.cost, budget, admm) if cfg.w2 > 0 else None
    eval_layer = RelocationLayer(data.travel_time, data.cost, budget, eval_admm or admm)
    opt = Adagrad(cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    record = TrainRecord()
    best = (np.inf, w.copy(), 0)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        sums = np.zeros(3)
        iters, nonconv, count = [], 0, 0
        for start in range(0, len(train), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            b = train.subset(idx)
            ev = batch_loss_and_grad(
                w, adj, layer, b.hist, b.truth, b.supply, data.target_at(b.t), cfg
            )
            opt.step(w, ev.grads)
            k = len(idx)
            sums += k * np.array([ev.l1, ev.l2 if cfg.w2 > 0 else 0.0, ev.loss])
            count += k
            iters.append(ev.iterations)
            nonconv += ev.nonconverged
        val_loss, val = _validate(w, adj, eval_layer, data, cfg)
        record.epoch.append(epoch)
        record.l1.append(float(sums[0] / count))
        record.l2.append(float(sums[1] / count) if cfg.w2 > 0 else float("nan"))
        record.l_spo.append(float(sums[2] / count))
        record.val_loss.append(val_loss)
        record.val_rmse.append(val.metrics.rmse if val else float("nan"))
        record.val_smape.append(val.metrics.smape if val else float("nan"))
        record.mean_iterations.append(float(np.mean(iters)))
        record.nonconverged.append(int(nonconv))
        log.info("epoch %d  L_spo=%.4f  val=%.4f", epoch, record.l_spo[-1], val_loss)
        if val_loss < best[0]:
            best = (val_loss, w.copy(), epoch)
    if cfg.epochs == 0:
        return w, record
    record.best_epoch = best[2]
    return best[1], record


def train_pto(data: ExperimentData, cfg: SpoConfig, eval_admm: AdmmConfig, budget: float, weights=None):
    """Prediction-only training: :func:`train_spo` with ``w2 = 0``."""
    pto = SpoConfig(**{**asdict(cfg), "w2": 0.0, "w1": cfg.w1 or 1.0})
    return train_spo(data, pto, eval_admm, budget, eval_admm, weights)


def _validate(w, adj, layer, data, cfg: SpoConfig):
    """Validation ``L_SPO`` (converged solves only) and matched-distribution metrics."""
    if len(data.val) == 0:
        return float("nan"), None
    res = evaluate_policy(w, data, data.val, "SPO", layer)
    keep = np.isin(data.val.t, res.t)
    theta = np.atleast_2d(predict(data.val.hist[keep], adj, w))
    l1 = float(np.mean(np.sum((data.val.truth[keep] - theta) ** 2, axis=1)))
    l2 = float(np.mean(np.sum((res.target - res.matched) ** 2, axis=1)))
    return spo_loss(l1, l2, cfg), res


@dataclass
class EvalResult:
    regime: str
    metrics: mt.Metrics
    t: np.ndarray
    matched: np.ndarray
    target: np.ndarray
    flows: np.ndarray | None
    max_violation: dict
    iterations: np.ndarray | None


def evaluate_policy(
    weights: PredictorWeights | None,
    data: ExperimentData,
    samples: Samples,
    regime: str,
    layer: RelocationLayer,
) -> EvalResult:
    """Matched-vs-target metrics of one regime over a sample split.

    SPO and PTO share this path; they differ only in the weights passed.
    Samples whose inner solve hits ``k_max`` are skipped and counted.
    """
    regime = regime.upper()
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if len(samples) == 0:
        raise ValueError("empty split")
    target = data.target_at(samples.t)
    if regime == "DON":
        matched = samples.truth + samples.supply
        return EvalResult(regime, mt.aggregate(matched, target), samples.t, matched, target, None, {}, None)
    if regime == "NOP":
        theta = persistence_predict(samples.hist)
    else:
        if weights is None:
            raise ValueError(f"{regime} needs predictor weights")
        theta = predict(samples.hist, Adjacency(data.grid.neighbors), weights)
    sol = layer.solve(theta, target, samples.supply)
    ok = sol.converged
    matched = layer.arrivals(sol.Y) + samples.truth
    worst = {}
    for k in np.flatnonzero(ok):
        for name, v in plan_violations(layer.instance(samples.supply[k], target[k]), sol.Y[k]).items():
            worst[name] = max(worst.get(name, 0.0), v)
    skipped = int((~ok).sum())
    if skipped:
        log.warning("%s: %d of %d solves hit k_max and were skipped", regime, skipped, ok.size)
    if not ok.any():
        raise RuntimeError(f"{regime}: no inner solve converged")
    metrics = mt.aggregate(matched[ok], target[ok], skipped=skipped)
    return EvalResult(regime, metrics, samples.t[ok], matched[ok], target[ok], sol.Y[ok], worst, sol.iterations[ok])


def calibrate_budget(data: ExperimentData, admm: AdmmConfig, quantile: float = 0.75) -> float:
    """Budget that binds on roughly ``1 - quantile`` of training intervals.

    Solves the persistence-forecast problems with a non-binding budget and
    returns the given quantile of the incentive actually spent.
    """
    s = data.train
    loose = float(s.supply.sum(axis=1).max() * data.cost.max()) + 1.0
    layer = RelocationLayer(data.travel_time, data.cost, loose, admm)
    sol = layer.solve(persistence_predict(s.hist), data.target_at(s.t), s.supply)
    spent = sol.Y @ data.cost.ravel()
    return float(np.round(np.quantile(spent, quantile), 6))
