import cvxpy as cp
import numpy as np
import pytest

from coupledmg.lower_level import (
    DENSE_LIMIT,
    TIKHONOV,
    aggregate_demand,
    local_objective,
    solve_local_central,
    solve_local_distributed,
)
from coupledmg.model import BatteryParams, build_microgrid_model
from coupledmg.verify import random_microgrid


def oracle(mg, zeta):
    u = cp.Variable(mg.n_controls)
    obj = cp.sum_squares(mg.A @ u + mg.b - zeta) + TIKHONOV * cp.sum_squares(u)
    prob = cp.Problem(cp.Minimize(obj), [mg.D_sparse() @ u <= mg.d])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return float(np.sum((mg.A @ u.value + mg.b - zeta) ** 2))


def test_no_storage_means_no_freedom():
    w = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]])
    mg = build_microgrid_model([BatteryParams.no_battery()] * 2, 3, 0.25, [0.0, 0.0], w)
    zeta = np.array([1.0, 1.0, 1.0])
    sol = solve_local_central(mg, zeta)
    np.testing.assert_array_equal(sol.u, 0.0)
    np.testing.assert_array_equal(sol.z_bar, w.sum(axis=0))
    assert sol.objective == pytest.approx(np.sum((w.sum(axis=0) - zeta) ** 2), abs=1e-12)


def test_reference_equal_to_baseline():
    rng = np.random.default_rng(0)
    mg = random_microgrid(rng, 3, 4)
    sol = solve_local_central(mg, mg.b)
    assert sol.objective <= 1e-12
    np.testing.assert_allclose(sol.u, 0.0, atol=1e-6)


def test_one_unit_shift():
    p = BatteryParams(1.0, 1.0, 1.0, 10.0, -1.0, 1.0)
    mg = build_microgrid_model([p], 2, 1.0, [5.0], np.array([[2.0, 0.0]]))
    sol = solve_local_central(mg, [1.0, 1.0])
    np.testing.assert_allclose(sol.z_bar, [1.0, 1.0], atol=1e-6)
    assert sol.objective <= 1e-10


def test_solution_invariants():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mg = random_microgrid(rng, int(rng.integers(1, 5)), int(rng.integers(2, 7)))
        zeta = mg.b + rng.normal(0, 1, mg.horizon)
        sol = solve_local_central(mg, zeta)
        assert mg.constraint_violation(sol.u) <= 1e-8
        np.testing.assert_array_equal(sol.z_bar, mg.aggregate(sol.u))
        assert sol.objective <= local_objective(mg, np.zeros(mg.n_controls), zeta)
        ref = oracle(mg, zeta)
        assert sol.objective <= ref + 1e-7 * (1 + ref)


def test_structured_path_matches_oracle():
    rng = np.random.default_rng(2)
    mg = random_microgrid(rng, 12, 24)
    assert mg.n_controls > DENSE_LIMIT
    zeta = mg.b + rng.normal(0, 2, mg.horizon)
    sol = solve_local_central(mg, zeta)
    assert mg.constraint_violation(sol.u) <= 1e-8
    ref = oracle(mg, zeta)
    assert abs(sol.objective - ref) <= 1e-6 * (1 + ref)


def test_warm_start_never_hurts():
    rng = np.random.default_rng(3)
    mg = random_microgrid(rng, 3, 5)
    zeta = mg.b + rng.normal(0, 1, mg.horizon)
    cold = solve_local_central(mg, zeta)
    warm = solve_local_central(mg, zeta, warm=cold)
    assert warm.objective <= cold.objective + 1e-12


def test_distributed_single_household():
    rng = np.random.default_rng(4)
    for _ in range(5):
        mg = random_microgrid(rng, 1, 5)
        zeta = mg.b + rng.normal(0, 1, mg.horizon)
        c, d = solve_local_central(mg, zeta), solve_local_distributed(mg, zeta)
        assert abs(d.objective - c.objective) <= 1e-8 * (1 + c.objective)


def test_distributed_no_storage_stops_at_once():
    mg = build_microgrid_model([BatteryParams.no_battery()] * 3, 4, 0.25, [0.0] * 3, np.ones((3, 4)))
    sol = solve_local_distributed(mg, np.zeros(4))
    assert sol.iterations == 1
    np.testing.assert_array_equal(sol.u, 0.0)


def test_distributed_matches_central():
    rng = np.random.default_rng(5)
    for _ in range(10):
        mg = random_microgrid(rng, 3, 4)
        zeta = mg.b + rng.normal(0, 1, mg.horizon)
        c, d = solve_local_central(mg, zeta), solve_local_distributed(mg, zeta)
        assert mg.constraint_violation(d.u) <= 1e-8
        assert d.objective >= c.objective - 1e-6 * (1 + abs(c.objective))
        assert abs(d.objective - c.objective) <= 1e-4 * max(c.objective, 1e-9) + 1e-9
        # the optimal aggregate is unique even when controls are not
        np.testing.assert_allclose(d.z_bar, c.z_bar, atol=1e-4)


def test_distributed_with_executor():
    from concurrent.futures import ThreadPoolExecutor

    rng = np.random.default_rng(6)
    mg = random_microgrid(rng, 3, 4)
    zeta = mg.b + rng.normal(0, 1, mg.horizon)
    with ThreadPoolExecutor(2) as pool:
        par = solve_local_distributed(mg, zeta, executor=pool)
    seq = solve_local_distributed(mg, zeta)
    np.testing.assert_array_equal(par.u, seq.u)


def test_aggregate_demand():
    np.testing.assert_array_equal(aggregate_demand([[1, 2], [3, 4]]), [4, 6])
    np.testing.assert_array_equal(aggregate_demand([[1.5, 2.5]]), [1.5, 2.5])
    np.testing.assert_array_equal(aggregate_demand(np.zeros((100, 7))), np.zeros(7))
    with pytest.raises(ValueError):
        aggregate_demand([[1, 2], [3]])


def test_reference_length_checked():
    rng = np.random.default_rng(7)
    mg = random_microgrid(rng, 2, 4)
    with pytest.raises(ValueError):
        solve_local_central(mg, np.zeros(3))


def test_tridiagonal_factor_survives_wide_scales():
    # interior SoC stretches give weights near 1e8 next to pinned ones near 1e-8
    from coupledmg._household_ipm import _ldl_solve, _ldl_tridiag

    N, a = 40, 0.999
    dx = np.full(N, 1e-8)
    dx[5:22] = 9.4e5
    cc = np.full(N, 1e-12)
    G = np.eye(N) - a * np.eye(N, k=-1)
    T = G @ np.diag(dx) @ G.T + np.diag(cc)
    dfac, lfac = np.empty(N), np.zeros(N)
    _ldl_tridiag(dx, cc, a, dfac, lfac)
    assert (dfac > 0).all()
    L = np.eye(N) + np.diag(lfac[1:], k=-1)
    np.testing.assert_allclose(L @ np.diag(dfac) @ L.T, T, rtol=1e-12, atol=1e-12 * np.abs(T).max())
    r = np.random.default_rng(8).normal(size=N)
    out = np.empty(N)
    _ldl_solve(dfac, lfac, r, out)
    # T is nearly singular, so judge the solve by its backward error
    assert np.linalg.norm(T @ out - r) <= 1e-13 * np.linalg.norm(T, 2) * np.linalg.norm(out)
