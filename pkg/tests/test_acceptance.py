"""Acceptance suite: one pass/fail line per criterion, at the stated tolerances.

Run alone with ``pytest tests/test_acceptance.py -s`` (about 8 minutes on
one core, dominated by the three training runs of criterion 4).
"""

import filecmp
import math
import shutil
import time

import numpy as np
import pytest

from sporeloc.admm_layer import AdmmConfig, SolverContext, solve, solve_batch, solve_with_gradients
from sporeloc.cli import RunConfig, main, run_experiment
from sporeloc.datagen import incentive_cost_matrix, make_hex_grid, travel_time_matrix
from sporeloc.gradcheck import check_end_to_end, check_layer_jacobian, nondegenerate_instances, random_instance
from sporeloc.metrics import rmse, smape
from sporeloc.relocation import RelocationInstance, build_sparse_A, to_standard_qp

SEEDS = (0, 1, 2)


def report(capsys, number, passed, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


def criterion1_instances(seed=2024, topologies=5, per_topology=8):
    """200 instances, N in 2..6: five random networks per N, eight demand draws each."""
    rng = np.random.default_rng(seed)
    groups = []
    for n in range(2, 7):
        for _ in range(topologies):
            base, _ = random_instance(rng, n)
            qps = []
            for _ in range(per_topology):
                draw, free = random_instance(rng, n)
                inst = RelocationInstance(draw.supply, draw.target, base.travel_time, base.cost, draw.budget)
                qps.append(to_standard_qp(inst, inst.target - free))
            groups.append(qps)
    return groups


def test_criterion1_oracle_optimality(capsys):
    t0 = time.time()
    cfg = AdmmConfig(xi=1e-6, k_max=100_000)
    ref_cfg = AdmmConfig(xi=1e-300, k_max=100_000, min_iter=100_000)
    worst = {"stationarity": 0.0, "primal_infeasibility": 0.0, "complementarity": 0.0}
    kkt_fail, obj_err, count = 0, 0.0, 0
    for qps in criterion1_instances():
        ctx = SolverContext(qps[0], ref_cfg)
        ref = solve_batch(ctx, np.stack([q.q for q in qps]), np.stack([q.h_stacked for q in qps]))
        for qp, z_ref in zip(qps, ref.objective):
            res = solve(qp, cfg)
            count += 1
            for k in worst:
                worst[k] = max(worst[k], getattr(res.kkt, k))
            kkt_fail += res.kkt.worst > 1e-4
            z, zr = res.objective + qp.offset, z_ref + qp.offset
            obj_err = max(obj_err, abs(z - zr) / max(abs(zr), 1.0))
    elapsed = time.time() - t0
    ok = kkt_fail == 0 and obj_err <= 1e-3 and elapsed < 120
    detail = (
        f"{count} instances: {kkt_fail} with a KKT residual > 1e-4 "
        f"(max stat {worst['stationarity']:.2e}, primal {worst['primal_infeasibility']:.2e}, "
        f"compl {worst['complementarity']:.2e}); max objective rel err vs 1e5-sweep reference "
        f"{obj_err:.2e} (tol 1e-3); {elapsed:.0f}s (limit 120s)"
    )
    report(capsys, 1, ok, detail)


def test_criterion2_gradient_fidelity(capsys):
    t0 = time.time()
    insts = nondegenerate_instances(50, 4, seed=0)
    errs = [check_layer_jacobian(inst, free, step=1e-4).rel_error for inst, free in insts]
    elapsed = time.time() - t0
    ok = len(errs) == 50 and max(errs) <= 1e-3 and elapsed < 300
    report(capsys, 2, ok, f"{len(errs)} N=4 instances, max rel err {max(errs):.2e} (tol 1e-3), {elapsed:.0f}s")


def test_criterion3_end_to_end_gradient(capsys):
    t0 = time.time()
    err = check_end_to_end(seed=0)
    elapsed = time.time() - t0
    report(capsys, 3, err <= 1e-2 and elapsed < 60, f"2-grid toy, rel err {err:.2e} (tol 1e-2), {elapsed:.1f}s")


@pytest.fixture(scope="module")
def experiment_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.time()
    runs = {}
    for s in SEEDS:
        cfg = RunConfig(seed=s, train_seeds=str(s), out=str(root / f"seed{s}"))
        cfg.validate()
        runs[s] = run_experiment(cfg)
    return runs, time.time() - t0


def test_criterion4_directional_replication(capsys, experiment_runs):
    runs, elapsed = experiment_runs
    mean = {r: float(np.mean([runs[s]["table"][r]["rmse"] for s in SEEDS])) for r in ("SPO", "PTO", "DON", "NOP")}
    gain_spo = 1 - mean["SPO"] / mean["DON"]
    gain_pto = 1 - mean["PTO"] / mean["DON"]
    ok = mean["SPO"] <= mean["PTO"] and gain_spo >= 0.25 and gain_pto >= 0.25 and elapsed < 900
    detail = (
        f"mean test RMSE over seeds {SEEDS}: SPO {mean['SPO']:.4f}, PTO {mean['PTO']:.4f}, "
        f"NOP {mean['NOP']:.4f}, DON {mean['DON']:.4f}; gain over DON SPO {gain_spo:.1%}, "
        f"PTO {gain_pto:.1%} (need >= 25%); {elapsed:.0f}s (limit 900s)"
    )
    report(capsys, 4, ok, detail)


def test_criterion5_scale(capsys):
    rng = np.random.default_rng(0)
    grid = make_hex_grid(5, 9)
    supply = rng.integers(0, 12, 45).astype(float)
    target = rng.integers(0, 20, 45).astype(float)
    free = rng.uniform(0, 10, 45)
    inst = RelocationInstance(
        supply, target, travel_time_matrix(grid), incentive_cost_matrix(grid), budget=0.5 * supply.sum()
    )
    qp = to_standard_qp(inst, inst.target - free)
    t0 = time.time()
    res = solve_with_gradients(qp, AdmmConfig(xi=0.05, rho=2.0), build_sparse_A(45).T)
    elapsed = time.time() - t0
    ok = res.converged and res.kkt.stationarity <= 1e-2 and elapsed < 60
    detail = (
        f"N=45 (2025 flows): converged={res.converged} in {res.iterations} sweeps, "
        f"stationarity {res.kkt.stationarity:.2e} (tol 1e-2), {elapsed:.1f}s (limit 60s)"
    )
    report(capsys, 5, ok, detail)


def test_criterion6_feasibility(capsys, experiment_runs):
    runs, _ = experiment_runs
    worst, skipped = 0.0, 0
    for s in SEEDS:
        for regime, row in runs[s]["per_seed"][str(s)].items():
            worst = max([worst, *row["max_violation"].values()])
            skipped += row["skipped"]
    ok = worst <= 1e-3 and skipped == 0
    report(capsys, 6, ok, f"max constraint violation over all evaluated plans {worst:.2e} (tol 1e-3), {skipped} skipped")


def test_criterion7_metric_fixtures(capsys):
    checks = [
        smape([5], [15]) == 100.0,
        smape([0], [10]) == 200.0,
        smape([4, 4], [4, 4]) == 0.0,
        smape([0, 0], [0, 0]) == 0.0,
        rmse([3, 4], [0, 0]) == math.sqrt(12.5),
        rmse([1, 2], [1, 2]) == 0.0,
    ]
    report(capsys, 7, all(checks), f"{sum(checks)}/{len(checks)} hand fixtures exact")


def test_criterion8_determinism(capsys, tmp_path):
    out = tmp_path / "run"
    args = ["experiment", "--rows", "2", "--cols", "3", "--days", "3", "--epochs", "3", "--hidden", "4",
            "--train-seeds", "0,1", "--out", str(out)]
    assert main(args) == 0
    first = tmp_path / "first"
    shutil.copytree(out, first)
    shutil.rmtree(out)
    assert main(["experiment", "--config", str(first / "config.ini")]) == 0
    names = sorted(p.name for p in first.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(first, out, names, shallow=False)
    ok = not mismatch and not errors and sorted(p.name for p in out.iterdir()) == names
    report(capsys, 8, ok, f"{len(match)}/{len(names)} output files byte-identical on rerun from the written config")
