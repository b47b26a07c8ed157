import numpy as np
import pytest

from coupledmg.coordinator import BidirConfig, WarmStart, run_bidirectional
from coupledmg.model import BatteryParams, NetworkTopology
from coupledmg.mpc import PlantState, advance_soc, run_mpc
from coupledmg.upper_level import net_exchange
from coupledmg.verify import random_battery, random_topology

EXACT = BidirConfig(ell_max=500, epsilon=0.0, rel_epsilon=None)


def random_plant(rng, M=3, I=2, length=12, noise=0.0):
    batteries, soc, actual, pred = [], [], [], []
    for _ in range(M):
        drawn = [random_battery(rng, 0.0) for _ in range(I)]
        batteries.append([d[0] for d in drawn])
        soc.append(np.array([d[1] for d in drawn]))
        w = rng.normal(0.5, 1.0, (I, length))
        actual.append(w)
        pred.append(w + noise * rng.normal(size=w.shape))
    return PlantState(batteries, soc, actual, pred, 0.25)


def constant_reference(values, horizon):
    ref = np.repeat(np.asarray(values, dtype=float)[:, None], horizon, axis=1)
    return lambda k: ref


def test_one_step_equals_open_loop():
    rng = np.random.default_rng(0)
    state = random_plant(rng)
    top = random_topology(rng, 3, 0.9)
    ref = constant_reference(rng.normal(1, 0.5, 3), 4)
    trace = run_bidirectional(state.models(4), top, ref(0))
    res = run_mpc(state, top, ref, 4, 1)
    rec = res.records[0]
    for mg, sol, applied in zip(state.models(4), trace.solutions, rec.controls):
        assert mg.split(sol.u)[:, 0, :].tobytes() == applied.tobytes()
    assert rec.delta.tobytes() == trace.plan.delta[0].tobytes()
    assert rec.plan_cost == trace.cost
    # the plant state passed in is untouched
    assert res.state is not state and state.k == 0


def test_no_actuation_realizes_actual_demand():
    rng = np.random.default_rng(1)
    state = random_plant(rng, 3, 2, 8)
    state.batteries = [[BatteryParams.no_battery()] * 2 for _ in range(3)]
    state.soc = [np.zeros(2) for _ in range(3)]
    res = run_mpc(state, NetworkTopology.isolated(3), constant_reference(np.zeros(3), 3), 3, 5)
    assert res.completed == 5 and res.error is None
    for rec in res.records:
        expected = np.array([w[:, rec.k].sum() for w in state.w_actual])
        np.testing.assert_array_equal(rec.demand_after_exchange, expected)
        assert rec.iterations == 1


@pytest.mark.xfail(strict=True, reason=(
    "each receding window brings in steps the k = 0 plan never saw, so the closed loop may give up "
    "early tracking for them; here step 2 costs 0.047 instead of 0.0019 (14% over in total)"))
def test_closed_loop_tracks_open_loop_plan():
    rng = np.random.default_rng(2)
    N, K = 6, 3
    state = random_plant(rng, 3, 2, N + K)
    top = random_topology(rng, 3, 0.9)
    ref = constant_reference(rng.normal(1, 0.5, 3), N)
    trace = run_bidirectional(state.models(N), top, ref(0), EXACT)
    open_loop = np.sum((ref(0) - trace.z_bar - net_exchange(trace.plan, trace.geometry)) ** 2, axis=0)[:K]
    res = run_mpc(state, top, ref, N, K, EXACT)
    closed = res.stage_costs
    assert abs(closed.sum() - open_loop.sum()) <= 0.05 * open_loop.sum() + 1e-9


def test_shifting_is_consistent():
    # with exact predictions the k = 0 plan, shifted and padded with one idle
    # step, is available at k = 1; the optimum there can only be lower
    rng = np.random.default_rng(3)
    for _ in range(3):
        N = 5
        state = random_plant(rng, 3, 2, N + 1)
        top = random_topology(rng, 3, 0.9)
        ref = constant_reference(rng.normal(1, 0.5, 3), N)
        t0 = run_bidirectional(state.models(N), top, ref(0), EXACT)
        y = ref(0) - t0.z_bar - net_exchange(t0.plan, t0.geometry)
        tail = np.sum(y[:, 1:] ** 2)
        res = run_mpc(state, top, ref, N, 1, EXACT)
        idle = np.sum((ref(1)[:, -1] - [w[:, N].sum() for w in state.w_pred]) ** 2)
        # the idle step sees the SoC the k = 0 plan leaves behind
        t1 = run_bidirectional(res.state.models(N), top, ref(1), EXACT)
        bound = tail + idle
        assert t1.cost <= bound * (1 + 1e-6) + 1e-8


def test_soc_stays_in_bounds_under_prediction_error():
    rng = np.random.default_rng(4)
    state = random_plant(rng, 3, 2, 14, noise=0.5)
    res = run_mpc(state, random_topology(rng, 3, 0.9), constant_reference(np.ones(3), 4), 4, 10)
    assert res.error is None and res.completed == 10
    for rec in res.records:
        assert rec.feasible and rec.soc_violation <= 1e-9
    for params, x in zip(state.batteries, res.state.soc):
        cap = np.array([p.capacity for p in params])
        assert ((x >= 0) & (x <= cap)).all()


def test_advance_soc_matches_dynamics():
    p = [BatteryParams(0.9, 0.8, 1.0, 5.0, -1.0, 1.0)]
    x = advance_soc(p, np.array([2.0]), np.array([[1.0, -0.5]]), 0.5)
    assert x[0] == pytest.approx(0.9 * 2.0 + 0.5 * (0.8 * 1.0 - 0.5))


def test_series_too_short():
    rng = np.random.default_rng(5)
    state = random_plant(rng, 2, 1, 5)
    with pytest.raises(ValueError):
        run_mpc(state, NetworkTopology.isolated(2), constant_reference(np.zeros(2), 4), 4, 3)


def test_solver_failure_keeps_partial_record():
    rng = np.random.default_rng(6)
    state = random_plant(rng, 2, 1, 8)
    good = np.zeros((2, 3))

    def reference(k):
        if k >= state.k + 2:
            return np.zeros((2, 2))  # wrong shape makes the inner run fail
        return good

    res = run_mpc(state, NetworkTopology.isolated(2), reference, 3, 4)
    assert res.completed == 2
    assert "step 2" in res.error


def test_warm_start_does_not_change_first_step():
    rng = np.random.default_rng(7)
    state = random_plant(rng)
    top = random_topology(rng, 3, 0.9)
    ref = constant_reference(np.ones(3), 4)
    a = run_mpc(state, top, ref, 4, 3, warm_start=True)
    b = run_mpc(state, top, ref, 4, 3, warm_start=False)
    assert a.records[0].stage_cost == b.records[0].stage_cost
    np.testing.assert_allclose(a.stage_costs, b.stage_costs, rtol=1e-3, atol=1e-6)
    assert WarmStart().plan is None
