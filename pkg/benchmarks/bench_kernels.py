"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Cases: a batched training-style solve with reverse-mode gradients on the
4x4 reference grid, and one forward-mode solve_with_gradients at N = 45.
Both backends must agree; the script checks that before timing.
"""

import argparse
import time

import numpy as np

from sporeloc.admm_layer import AdmmConfig, SolverContext, solve_batch, solve_with_gradients
from sporeloc.datagen import incentive_cost_matrix, make_hex_grid, travel_time_matrix
from sporeloc.relocation import RelocationInstance, build_sparse_A, to_standard_qp


def hex_problem(rows, cols, batch, seed=0):
    rng = np.random.default_rng(seed)
    grid = make_hex_grid(rows, cols)
    n = grid.n_grids
    supply = rng.integers(0, 12, (batch, n)).astype(float)
    target = rng.integers(0, 20, (batch, n)).astype(float)
    free = rng.uniform(0, 10, (batch, n))
    inst = RelocationInstance(supply[0], target[0], travel_time_matrix(grid), incentive_cost_matrix(grid), 0.5 * supply[0].sum())
    qps = [to_standard_qp(RelocationInstance(s, t, inst.travel_time, inst.cost, inst.budget), t - f)
           for s, t, f in zip(supply, target, free)]
    return qps


def batched_case(backend):
    qps = hex_problem(4, 4, 64)
    ctx = SolverContext(qps[0], AdmmConfig(backend=backend))
    Q = np.stack([q.q for q in qps])
    H = np.stack([q.h_stacked for q in qps])
    sol = solve_batch(ctx, Q, H, record=True)
    return sol.vjp(np.ones_like(sol.Y))


def large_case(backend):
    qp = hex_problem(5, 9, 1)[0]
    return solve_with_gradients(qp, AdmmConfig(backend=backend), build_sparse_A(45).T).J_y


def best_of(fn, backend, repeat):
    fn(backend)  # warm-up (numba compiles or loads its cache here)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(backend)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    cases = {"batch64 N=16 + vjp": batched_case, "single N=45 + J_y": large_case}
    print(f"{'case':22s} {'numba s':>9s} {'numpy s':>9s} {'speedup':>8s}")
    for name, fn in cases.items():
        diff = np.abs(fn("numba") - fn("numpy")).max()
        if diff > 1e-8:
            raise SystemExit(f"{name}: backends disagree by {diff:.2e}")
        tn = best_of(fn, "numba", args.repeat)
        tp = best_of(fn, "numpy", args.repeat)
        print(f"{name:22s} {tn:9.4f} {tp:9.4f} {tp / tn:7.2f}x")


if __name__ == "__main__":
    main()
