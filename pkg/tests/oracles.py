"""Independent reference computations used by the tests.

Nothing here imports the solver kernels; each oracle recomputes its
quantity from first principles with plain loops or generic scipy routines.
"""

import numpy as np
from scipy.optimize import minimize


def nested_loop_A(n):
    A = np.zeros((n, n * n))
    for i in range(n):
        for j in range(n):
            A[j, i * n + j] = 1.0
    return A


def nested_loop_B(n):
    B = np.zeros((n, n * n))
    for i in range(n):
        for j in range(n):
            B[i, i * n + j] = 1.0
    return B


def column_sums(x):
    n = len(x)
    return np.array([sum(x[i][j] for i in range(n)) for j in range(n)], dtype=float)


def row_sums(x):
    n = len(x)
    return np.array([sum(x[i][j] for j in range(n)) for i in range(n)], dtype=float)


def double_sum_objective(x, required):
    n = len(x)
    total = 0.0
    for j in range(n):
        arrivals = sum(x[i][j] for i in range(n))
        total += (arrivals - required[j]) ** 2
    return 0.5 * total


def dense_penalty(qp, rho):
    M = qp.P.toarray().copy()
    for g in qp.G:
        g = g.toarray()
        M += rho * g.T @ g
    return M


def scalar_admm(qp, rho, iters):
    """Plain-loop ADMM on the unscaled problem with a dense linear solve."""
    G = [g.toarray() for g in qp.G]
    h = [np.array(v, dtype=float) for v in qp.h]
    M = dense_penalty(qp, rho)
    n = qp.n_flow
    y = [0.0] * n
    s = [[max(0.0, v) for v in hb] for hb in h]
    mu = [[0.0] * len(hb) for hb in h]
    history = []
    for _ in range(iters):
        rhs = [-qp.q[c] for c in range(n)]
        for g, hb, sb, mb in zip(G, h, s, mu):
            for r in range(len(hb)):
                w = rho * (sb[r] - hb[r]) + mb[r]
                for c in range(n):
                    rhs[c] -= g[r, c] * w
        y = list(np.linalg.solve(M, np.array(rhs)))
        for b, (g, hb) in enumerate(zip(G, h)):
            for r in range(len(hb)):
                gy = sum(g[r, c] * y[c] for c in range(n))
                s_new = max(0.0, -mu[b][r] / rho - (gy - hb[r]))
                s[b][r] = s_new
                mu[b][r] = mu[b][r] + rho * (gy + s_new - hb[r])
        history.append((np.array(y), [np.array(v) for v in s], [np.array(v) for v in mu]))
    return history


def slsqp_objective(qp):
    """Optimal ``0.5 y'Py + q'y`` from a generic NLP solver."""
    P = qp.P.toarray()
    G = qp.G_stacked.toarray()
    h = qp.h_stacked
    res = minimize(
        lambda y: 0.5 * y @ P @ y + qp.q @ y,
        np.zeros(qp.n_flow),
        jac=lambda y: P @ y + qp.q,
        constraints=[{"type": "ineq", "fun": lambda y: h - G @ y, "jac": lambda y: -G}],
        method="SLSQP",
        options={"ftol": 1e-12, "maxiter": 2000},
    )
    return float(res.fun), res.x
