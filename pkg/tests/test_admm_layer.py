import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import dense_penalty, scalar_admm, slsqp_objective
from sporeloc.admm_layer import (
    AdmmConfig,
    AdmmState,
    SolverContext,
    admm_step,
    chain_loss_gradient,
    dual_update,
    init_jacobian,
    init_state,
    jacobian_step,
    primal_update,
    slack_update,
    solve,
    solve_batch,
    solve_with_gradients,
)
from sporeloc.gradcheck import central_difference, random_instance, relative_error
from sporeloc.qp_core import StandardQP, assemble_penalty_system
from sporeloc.relocation import RelocationInstance, build_sparse_A, to_standard_qp

TIGHT = AdmmConfig(xi=1e-10, k_max=20000)


def scalar_qp(g=1.0, h=2.0, q=0.0):
    """One flow, a single row in the supply block, zero rows elsewhere."""
    z = np.zeros((1, 1))
    return StandardQP(np.eye(1), [q], ([[g]], z, z, -np.eye(1)), ([h], [0.0], [0.0], [0.0]))


def rand_qp(seed, n):
    rng = np.random.default_rng(seed)
    inst, free = random_instance(rng, n)
    return inst, free, to_standard_qp(inst, inst.target - free)


def test_config_validation():
    for bad in ({"rho": 0}, {"xi": 0}, {"k_max": 0}, {"rho": -1.0}):
        with pytest.raises(ValueError):
            AdmmConfig(**bad)
    assert AdmmConfig() == AdmmConfig(2.0, 0.05, 2000, True)


def test_init_state():
    qp = scalar_qp(h=-1.0)
    st0 = init_state(qp)
    assert st0.s[0].tolist() == [0.0] and st0.y.tolist() == [0.0] and st0.k == 0 and st0.z == 0
    inst = RelocationInstance([3, 5], [0, 0], [[0, 1], [1, 0]], [[0, 1], [1, 0]], 4)
    st1 = init_state(to_standard_qp(inst, np.zeros(2)))
    assert st1.s[0].tolist() == [3, 5] and not st1.s[1].any() and st1.s[2].tolist() == [4]
    assert all(not m.any() for m in st1.mu)


def test_slack_and_dual_arithmetic():
    qp = scalar_qp(h=2.0)
    st0 = AdmmState(np.zeros(1), tuple(np.zeros(1) for _ in range(4)), tuple(np.zeros(1) for _ in range(4)))
    assert slack_update(st0, qp, 2.0)[0].tolist() == [2.0]  # Gy - h = -2
    on = AdmmState(np.array([2.0]), st0.s, (np.array([4.0]),) + st0.mu[1:])
    assert slack_update(on, qp, 2.0)[0].tolist() == [0.0]  # clamp active
    at = AdmmState(np.array([2.0]), st0.s, st0.mu)
    assert slack_update(at, qp, 2.0)[0].tolist() == [0.0]  # Gy = h
    # Gy + s - h = 1 with mu = 0, rho = 2
    res = AdmmState(np.array([3.0]), st0.s, st0.mu)
    assert dual_update(res, qp, 2.0)[0].tolist() == [2.0]
    feas = AdmmState(np.array([0.5]), (np.array([1.5]),) + st0.s[1:], (np.array([0.7]),) + st0.mu[1:])
    assert dual_update(feas, qp, 2.0)[0].tolist() == [0.7]


def test_primal_update_zero_rhs(small_instance):
    qp = to_standard_qp(small_instance, np.zeros(3))
    sysm = assemble_penalty_system(qp, 2.0)
    st0 = AdmmState(np.zeros(9), tuple(h.copy() for h in qp.h), tuple(np.zeros_like(h) for h in qp.h))
    assert np.abs(primal_update(st0, sysm, qp)).max() < 1e-14


def test_primal_update_is_minimizer_and_matches_dense(small_instance, rng):
    qp = to_standard_qp(small_instance, rng.normal(size=3))
    rho = 2.0
    sysm = assemble_penalty_system(qp, rho)
    st0 = AdmmState(
        rng.normal(size=9),
        tuple(rng.uniform(0, 2, h.size) for h in qp.h),
        tuple(rng.uniform(0, 2, h.size) for h in qp.h),
    )
    y = primal_update(st0, sysm, qp)
    grad = qp.P @ y + qp.q
    for g, h, s, mu in zip(qp.G, qp.h, st0.s, st0.mu):
        grad += g.T @ (mu + rho * (g @ y + s - h))
    assert np.abs(grad).max() < 1e-8
    rhs = qp.q + sum(g.T @ (rho * (s - h) + mu) for g, h, s, mu in zip(qp.G, qp.h, st0.s, st0.mu))
    assert np.allclose(y, np.linalg.solve(dense_penalty(qp, rho), -rhs), atol=1e-10)


def test_primal_update_dimension_check(small_instance):
    qp = to_standard_qp(small_instance, np.zeros(3))
    sysm = assemble_penalty_system(qp, 2.0)
    bad = AdmmState(np.zeros(4), init_state(qp).s, init_state(qp).mu)
    with pytest.raises(ValueError):
        primal_update(bad, sysm, qp)


def test_dual_matches_scalar_loop():
    _, _, qp = rand_qp(3, 3)
    cfg = AdmmConfig(xi=1e-300, k_max=40, equilibrate=False)
    ctx = SolverContext(qp, cfg)
    st_ = init_state(qp)
    ref = scalar_admm(qp, cfg.rho, 40)
    for k in range(40):
        st_ = admm_step(st_, ctx.system, qp)
        y_ref, s_ref, mu_ref = ref[k]
        assert np.allclose(st_.y, y_ref, atol=1e-9)
        for a, b in zip(st_.mu, mu_ref):
            assert np.allclose(a, b, atol=1e-9)


@given(st.integers(0, 10_000), st.integers(2, 5), st.booleans())
def test_iterate_invariants(seed, n, equilibrate):
    _, _, qp = rand_qp(seed, n)
    ctx = SolverContext(qp, AdmmConfig(equilibrate=equilibrate))
    st_ = init_state(ctx.work)
    for _ in range(30):
        st_ = admm_step(st_, ctx.system, ctx.work)
        for s, mu in zip(st_.s, st_.mu):
            assert np.all(s >= 0)
            assert np.all(mu >= -1e-12)
            assert np.abs(mu * s).max(initial=0.0) <= 1e-9 * max(1.0, np.abs(mu).max(initial=0.0))


@pytest.mark.parametrize("equilibrate", [False, True])
def test_engine_matches_blockwise_reference(equilibrate):
    _, _, qp = rand_qp(11, 4)
    cfg = AdmmConfig(xi=1e-300, k_max=60, equilibrate=equilibrate)
    ctx = SolverContext(qp, cfg)
    res = solve(qp, cfg, context=ctx)
    st_ = init_state(ctx.work)
    for _ in range(res.iterations):
        st_ = admm_step(st_, ctx.system, ctx.work)
    assert np.allclose(res.y, st_.y, atol=1e-11)
    assert np.allclose(np.concatenate(res.mu), ctx.row_scale * np.concatenate(st_.mu), atol=1e-10)


def test_determinism():
    _, _, qp = rand_qp(5, 4)
    a, b = solve(qp, TIGHT), solve(qp, TIGHT)
    assert np.array_equal(a.y, b.y) and a.iterations == b.iterations


def test_origin_optimal_when_q_zero(small_instance):
    res = solve(to_standard_qp(small_instance, np.zeros(3)), TIGHT)
    assert np.abs(res.y).max() < 1e-8
    assert abs(res.objective) < 1e-12


def test_feasible_exact_match_has_zero_objective():
    inst = RelocationInstance([5, 5], [3, 7], [[0, 10], [10, 0]], [[1, 1], [1, 1]], budget=100)
    qp = to_standard_qp(inst, np.array([3.0, 7.0]))
    res = solve(qp, TIGHT)
    assert res.objective + qp.offset == pytest.approx(0.0, abs=1e-6)
    assert res.kkt.worst <= 1e-4


def test_zero_budget_forces_zero_flow():
    inst = RelocationInstance([5, 5], [3, 7], [[0, 10], [10, 0]], [[1, 2], [2, 1]], budget=0)
    r = np.array([3.0, 7.0])
    qp = to_standard_qp(inst, r)
    res = solve(qp, TIGHT)
    assert np.abs(res.y).max() < 1e-6
    assert res.objective + qp.offset == pytest.approx(0.5 * r @ r, rel=1e-6)


def test_nonconvergence_is_flagged_not_raised():
    _, _, qp = rand_qp(2, 4)
    res = solve(qp, AdmmConfig(xi=1e-12, k_max=3))
    assert not res.converged and res.iterations == 3


@given(st.integers(0, 10_000), st.floats(1e-6, 1.0))
def test_doubling_xi_never_increases_iterations(seed, xi):
    _, _, qp = rand_qp(seed, 3)
    k1 = solve(qp, AdmmConfig(xi=xi, k_max=5000)).iterations
    k2 = solve(qp, AdmmConfig(xi=2 * xi, k_max=5000)).iterations
    assert k2 <= k1


@pytest.mark.parametrize("seed", range(6))
def test_objective_matches_generic_solver(seed):
    _, _, qp = rand_qp(seed, 3)
    ref, _ = slsqp_objective(qp)
    res = solve(qp, TIGHT)
    assert res.objective == pytest.approx(ref, abs=1e-4 * max(1.0, abs(ref)))


def test_backends_agree():
    pytest.importorskip("numba")
    _, free, qp = rand_qp(9, 4)
    A = build_sparse_A(4)
    out = {}
    for backend in ("numba", "numpy"):
        cfg = AdmmConfig(xi=1e-8, k_max=3000, backend=backend)
        ctx = SolverContext(qp, cfg)
        g = solve_with_gradients(qp, cfg, A.T, context=ctx)
        b = solve_batch(ctx, np.stack([qp.q, -qp.q]), np.stack([qp.h_stacked] * 2), record=True)
        out[backend] = (g.y, g.J_y, b.Y, b.vjp(np.ones_like(b.Y)), g.iterations)
    for a, b in zip(out["numba"], out["numpy"]):
        assert np.allclose(a, b, rtol=0, atol=1e-10)


def test_first_jacobian_step(small_instance):
    qp = to_standard_qp(small_instance, np.ones(3))
    sysm = assemble_penalty_system(qp, 2.0)
    A = build_sparse_A(3).toarray()
    st1 = admm_step(init_state(qp), sysm, qp)
    j1 = jacobian_step(init_jacobian(qp, 3), st1, qp, sysm, A.T)
    assert np.allclose(j1.J_y, -np.linalg.solve(sysm.matrix, A.T), atol=1e-12)
    for s, js in zip(st1.s, j1.J_s):
        assert not js[s <= 0].any()


def test_theta_independent_problem_has_zero_jacobian(small_instance):
    qp = to_standard_qp(small_instance, np.ones(3))
    res = solve_with_gradients(qp, TIGHT, np.zeros((9, 3)))
    assert not res.J_y.any()
    with pytest.raises(ValueError):
        solve_with_gradients(qp, TIGHT, np.zeros((8, 3)))


def test_jacobian_fifty_iterations_n3():
    cfg = AdmmConfig(xi=1e-300, k_max=50)
    inst, free, qp = rand_qp(21, 3)
    A = build_sparse_A(3)
    res = solve_with_gradients(qp, cfg, A.T)
    assert res.iterations == 50

    def y_of(theta):
        return solve(qp.with_linear(q=-(A.T @ (inst.target - theta))), cfg).y

    fd = central_difference(y_of, free, 1e-4)
    assert relative_error(res.J_y, fd, floor=1.0) <= 1e-3


def test_directional_derivative_n4(rng):
    cfg = AdmmConfig(xi=1e-300, k_max=3000)
    inst, free, qp = rand_qp(4, 4)
    A = build_sparse_A(4)
    res = solve_with_gradients(qp, cfg, A.T)
    v = rng.normal(size=4)
    eps = 1e-4

    def y_of(theta):
        return solve(qp.with_linear(q=-(A.T @ (inst.target - theta))), cfg).y

    fd = (y_of(free + eps * v) - y_of(free - eps * v)) / (2 * eps)
    assert relative_error(res.J_y @ v, fd, floor=1.0) <= 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_reverse_mode_matches_forward(seed):
    inst, free, qp = rand_qp(seed, 4)
    A = build_sparse_A(4)
    cfg = AdmmConfig(xi=1e-6, k_max=3000)
    ctx = SolverContext(qp, cfg)
    fwd = solve_with_gradients(qp, cfg, A.T, context=ctx)
    n = qp.n_flow
    b = solve_batch(ctx, np.tile(qp.q, (n, 1)), np.tile(qp.h_stacked, (n, 1)), record=True)
    rev = b.vjp(np.eye(n)) @ A.T.toarray()
    assert np.abs(rev - fwd.J_y).max() <= 1e-8
    assert np.array_equal(b.Y[0], fwd.y)


def test_batch_equals_single_solves(rng):
    inst, free, qp = rand_qp(8, 4)
    ctx = SolverContext(qp, AdmmConfig(xi=1e-4, k_max=500))
    Q = rng.normal(scale=3, size=(6, 16))
    H = np.tile(qp.h_stacked, (6, 1))
    H[:, :4] = rng.integers(0, 9, (6, 4))
    G = rng.normal(size=(6, 16))
    batch = solve_batch(ctx, Q, H, record=True)
    grads = batch.vjp(G)
    assert len(set(batch.iterations.tolist())) > 1
    for i in range(6):
        one = solve_batch(ctx, Q[i:i + 1], H[i:i + 1], record=True)
        assert np.array_equal(one.Y[0], batch.Y[i])
        assert np.allclose(one.vjp(G[i:i + 1])[0], grads[i], atol=1e-12)
    with pytest.raises(RuntimeError):
        solve_batch(ctx, Q, H).vjp(G)


def test_vjp_is_transpose_of_jacobian():
    inst, free, qp = rand_qp(13, 3)
    A = build_sparse_A(3)
    cfg = AdmmConfig(xi=1e-8, k_max=3000)
    ctx = SolverContext(qp, cfg)
    fwd = solve_with_gradients(qp, cfg, A.T, context=ctx)
    g = np.random.default_rng(0).normal(size=9)
    b = solve_batch(ctx, qp.q[None], qp.h_stacked[None], record=True)
    assert np.allclose(A @ b.vjp(g[None])[0], chain_loss_gradient(g, fwd.J_y), atol=1e-9)


def test_chain_loss_gradient():
    J = np.vstack([np.eye(3), np.zeros((6, 3))])
    g = np.arange(9.0)
    assert chain_loss_gradient(g, J).tolist() == [0, 1, 2]
    assert not chain_loss_gradient(np.zeros(9), J).any()
    rng = np.random.default_rng(1)
    J2, g2 = rng.normal(size=(9, 3)), rng.normal(size=9)
    ref = [sum(J2[r, c] * g2[r] for r in range(9)) for c in range(3)]
    assert np.allclose(chain_loss_gradient(g2, J2), ref)
    with pytest.raises(ValueError):
        chain_loss_gradient(np.zeros(8), J)


def test_objective_change_small_before_stopping():
    """Over the last ten sweeps before stopping the objective moves by < 10 xi."""
    cfg = AdmmConfig(xi=1e-3, k_max=5000)
    bad = []
    for seed in range(10):
        _, _, qp = rand_qp(seed, 4)
        ctx = SolverContext(qp, cfg)
        res = solve(qp, cfg, context=ctx)
        st_ = init_state(ctx.work)
        zs = [0.0]
        for _ in range(res.iterations):
            st_ = admm_step(st_, ctx.system, ctx.work)
            zs.append(st_.z)
        worst = np.abs(np.diff(zs))[-10:].max()
        if worst >= 10 * cfg.xi:
            bad.append((seed, worst / cfg.xi))
    assert not bad, f"objective still moving near the stop (seed, max step / xi): {bad}"


def test_batch_partial_convergence_on_last_sweep():
    _, _, qp = rand_qp(8, 3)
    cfg = AdmmConfig(xi=1e-4, k_max=5000)
    ctx = SolverContext(qp, cfg)
    Q = np.stack([qp.q, 2 * qp.q])
    H = np.stack([qp.h_stacked] * 2)
    k = int(solve_batch(ctx, Q[:1], H[:1]).iterations[0])
    assert solve_batch(ctx, Q[1:], H[1:]).iterations[0] != k
    capped = SolverContext(qp, AdmmConfig(xi=1e-4, k_max=k))
    out = solve_batch(capped, Q, H)
    assert out.converged[0] and out.iterations.tolist() == [k, k]
    assert np.array_equal(out.Y[0], solve_batch(capped, Q[:1], H[:1]).Y[0])


def test_min_iter_runs_fixed_sweeps():
    _, _, qp = rand_qp(8, 3)
    assert solve(qp, AdmmConfig(xi=1.0, k_max=300, min_iter=300)).iterations == 300
    with pytest.raises(ValueError):
        AdmmConfig(min_iter=-1)
