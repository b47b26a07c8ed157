import cvxpy as cp
import numpy as np
import pytest

from coupledmg.coordinator import (
    DISTRIBUTED,
    BidirConfig,
    WarmStart,
    evaluate_overall_objective,
    local_costs,
    run_bidirectional,
)
from coupledmg.data_io import example1_scenario
from coupledmg.lower_level import solve_local_central
from coupledmg.model import NetworkTopology, build_microgrid_model
from coupledmg.upper_level import ExchangePlan, build_exchange_vectors
from coupledmg.verify import random_instance, random_topology

EXACT = dict(epsilon=0.0, rel_epsilon=None)


def joint_optimum(mgs, top, zeta):
    """Optimal overall cost over all controls and exchange fractions at once."""
    g = build_exchange_vectors(top)
    M, N = zeta.shape
    us = [cp.Variable(mg.n_controls) for mg in mgs]
    d = cp.Variable((N, g.n_directions)) if g.n_directions else None
    cost, cons = 0, []
    for k, (mg, u) in enumerate(zip(mgs, us)):
        ex = g.a[k] @ d.T if d is not None else 0
        cost += cp.sum_squares(zeta[k] - (mg.A @ u + mg.b) - ex)
        cons.append(mg.D_sparse() @ u <= mg.d)
    if d is not None:
        cons.append(d >= 0)
        cons += [d[:, 2 * j] + d[:, 2 * j + 1] <= 1 for j in range(g.n_directions // 2)]
    prob = cp.Problem(cp.Minimize(cost), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return prob.value


def _example1():
    sc = example1_scenario()
    mgs = [build_microgrid_model(b, sc.horizon, sc.dt, s, w) for b, s, w in zip(sc.batteries, sc.soc, sc.w_pred)]
    return mgs, sc.topology, sc.references(0)


def test_objective_examples():
    g = build_exchange_vectors(_example1()[1])
    z = np.arange(8.0).reshape(4, 2)
    assert evaluate_overall_objective(z, ExchangePlan.zeros(g, 2), z, g) == 0.0
    plan = ExchangePlan(np.array([[1, 0, 1, 0, 1, 0]], dtype=float), g.directions)
    z = np.array([[-10.0], [0.0], [0.0], [10.0]])
    assert evaluate_overall_objective(z, plan, np.zeros((4, 1)), g) == 0.0
    z = np.array([[-5.0], [-5.0], [5.0], [5.0]])
    assert evaluate_overall_objective(z, ExchangePlan.zeros(g, 1), np.zeros((4, 1)), g) == 100.0


def test_objective_checks_shapes():
    g = build_exchange_vectors(_example1()[1])
    with pytest.raises(ValueError):
        evaluate_overall_objective(np.zeros((3, 2)), ExchangePlan.zeros(g, 2), np.zeros((3, 2)), g)
    with pytest.raises(ValueError):
        evaluate_overall_objective(np.zeros((4, 2)), ExchangePlan.zeros(g, 3), np.zeros((4, 2)), g)


def test_example1():
    mgs, top, zeta = _example1()
    trace = run_bidirectional(mgs, top, zeta)
    assert abs(trace.cost) <= 1e-6
    assert trace.baseline_cost == pytest.approx(400.0)


def test_no_lines_stops_after_first_round():
    rng = np.random.default_rng(0)
    mgs, _, zeta = random_instance(rng, 3, 4, 2)
    top = NetworkTopology.isolated(3)
    trace = run_bidirectional(mgs, top, zeta)
    assert len(trace.records) == 1
    assert trace.plan.delta.shape == (4, 0)
    local = sum(solve_local_central(mg, z).objective for mg, z in zip(mgs, zeta))
    assert trace.cost == pytest.approx(local, rel=1e-9, abs=1e-12)


def test_matches_joint_optimum():
    rng = np.random.default_rng(1)
    for _ in range(3):
        mgs, top, zeta = random_instance(rng, 3, 4, 2)
        trace = run_bidirectional(mgs, top, zeta, BidirConfig(ell_max=500, **EXACT))
        ref = joint_optimum(mgs, top, zeta)
        assert abs(trace.cost - ref) <= 1e-4 * abs(ref) + 1e-9


def test_trace_invariants():
    rng = np.random.default_rng(2)
    for _ in range(15):
        M, N, I = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
        mgs, top, zeta = random_instance(rng, M, N, I)
        trace = run_bidirectional(mgs, top, zeta, BidirConfig(ell_max=30, **EXACT))
        before, after = trace.costs_before, trace.costs_after
        assert (after <= before + 1e-12).all()
        J = np.concatenate([[trace.baseline_cost], after])
        assert (np.diff(J) <= 1e-9 * (1 + J[:-1])).all()
        for prev, rec in zip(trace.records, trace.records[1:]):
            assert rec.plan.violation() <= 1e-8
            if np.abs(rec.z_bar - prev.z_bar).max() > 1e-6:
                assert rec.cost_after < prev.cost_after
        # the overall cost splits into the local costs against shifted references
        assert local_costs(trace, mgs).sum() == pytest.approx(trace.cost, rel=1e-9, abs=1e-12)
        for mg, s in zip(mgs, trace.solutions):
            assert mg.constraint_violation(s.u) <= 1e-8


def test_stopping_rules():
    rng = np.random.default_rng(3)
    mgs, top, zeta = random_instance(rng, 4, 5, 2)
    t = run_bidirectional(mgs, top, zeta, BidirConfig(ell_max=1))
    assert len(t.records) == 1 and t.stop_reason == "ell_max"
    # the first exchange moves energy here, so a second round always runs
    mgs, top, zeta = _example1()
    t = run_bidirectional(mgs, top, zeta, BidirConfig(ell_max=100, epsilon=1e6, rel_epsilon=None))
    assert len(t.records) == 2 and t.stop_reason == "epsilon"


def test_config_validation():
    with pytest.raises(ValueError):
        BidirConfig(ell_max=0)
    with pytest.raises(ValueError):
        BidirConfig(epsilon=-1.0)
    with pytest.raises(ValueError):
        BidirConfig(lower_mode="nope")


def test_distributed_mode_agrees():
    rng = np.random.default_rng(4)
    mgs, top, zeta = random_instance(rng, 3, 4, 2)
    c = run_bidirectional(mgs, top, zeta, BidirConfig(ell_max=200, **EXACT))
    d = run_bidirectional(mgs, top, zeta, BidirConfig(ell_max=200, lower_mode=DISTRIBUTED, **EXACT))
    assert abs(d.cost - c.cost) <= 1e-4 * c.cost + 1e-8


def test_parallel_equals_sequential():
    rng = np.random.default_rng(5)
    mgs, top, zeta = random_instance(rng, 4, 6, 2)
    s = run_bidirectional(mgs, top, zeta)
    p = run_bidirectional(mgs, top, zeta, BidirConfig(parallel=True, workers=3))
    assert s.costs_after.tobytes() == p.costs_after.tobytes()


def test_warm_start_keeps_result():
    rng = np.random.default_rng(6)
    mgs, top, zeta = random_instance(rng, 3, 5, 2)
    cfg = BidirConfig(ell_max=200, **EXACT)
    cold = run_bidirectional(mgs, top, zeta, cfg)
    warm = run_bidirectional(mgs, top, zeta, cfg, warm=WarmStart(cold.solutions, cold.plan))
    assert warm.cost <= cold.cost * (1 + 1e-6) + 1e-9


def test_input_validation():
    rng = np.random.default_rng(7)
    mgs, top, zeta = random_instance(rng, 3, 4, 1)
    with pytest.raises(ValueError):
        run_bidirectional(mgs[:2], top, zeta[:2])
    with pytest.raises(ValueError):
        run_bidirectional(mgs, top, zeta[:, :3])
    with pytest.raises(ValueError):
        run_bidirectional(mgs, random_topology(rng, 4), np.zeros((4, 4)))
