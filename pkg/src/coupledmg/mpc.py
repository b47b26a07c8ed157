"""
Receding-horizon closed loop around the bidirectional scheme.

At every step the controller measures the battery SoCs, builds models from
the predicted net consumption over the next ``N`` steps, runs the
bidirectional scheme and applies only the first control move and the
first exchange step. The plant then evolves with the actual net
consumption, which may differ from the prediction.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .coordinator import BidirConfig, IterationTrace, WarmStart, run_bidirectional
from .lower_level import FEAS_TOL, LocalSolution
from .model import BatteryParams, MicrogridModel, NetworkTopology, build_microgrid_model
from .upper_level import build_exchange_vectors

log = logging.getLogger(__name__)

# tolerance on plant SoC bounds
SOC_TOL = 1e-9


@dataclass
class PlantState:
    """Measured state of all microgrids at absolute step ``k``.

    ``w_actual`` and ``w_pred`` hold ``(I_k, steps)`` series per microgrid,
    indexed by absolute step.
    """

    batteries: List[List[BatteryParams]]
    soc: List[np.ndarray]
    w_actual: List[np.ndarray]
    w_pred: List[np.ndarray]
    dt: float
    k: int = 0

    def copy(self) -> "PlantState":
        return PlantState(self.batteries, [s.copy() for s in self.soc], self.w_actual, self.w_pred, self.dt, self.k)

    @property
    def n_microgrids(self) -> int:
        return len(self.batteries)

    def models(self, horizon: int) -> List[MicrogridModel]:
        """Controller models from the measured SoC and the predicted window."""
        return [
            build_microgrid_model(b, horizon, self.dt, s, w[:, self.k:self.k + horizon])
            for b, s, w in zip(self.batteries, self.soc, self.w_pred)
        ]


@dataclass
class ClosedLoopRecord:
    """What happened at one closed-loop step.

    Attributes
    ----------
    k : int
        Absolute step.
    controls : list of ndarray
        Applied ``(u_plus, u_minus)`` per household, shape ``(I_k, 2)``.
    delta : ndarray
        Applied exchange fractions, one per directed line.
    demand_before_exchange, demand_after_exchange : ndarray, shape (M,)
        Realized aggregated demand per microgrid.
    reference : ndarray, shape (M,)
    stage_cost : float
        ``sum_k (zeta_k - demand_after_exchange_k)^2``.
    iterations : int
        Rounds of the bidirectional scheme.
    plan_cost : float
        Final cost of the inner open-loop problem.
    feasible : bool
        Applied move satisfies the step constraints and plant SoCs stay
        in bounds.
    soc_violation : float
        Largest excursion of a plant SoC outside ``[0, C]`` before clipping.
    """

    k: int
    controls: List[np.ndarray]
    delta: np.ndarray
    demand_before_exchange: np.ndarray
    demand_after_exchange: np.ndarray
    reference: np.ndarray
    stage_cost: float
    iterations: int
    plan_cost: float
    feasible: bool
    soc_violation: float
    seconds: float = 0.0


@dataclass
class ClosedLoopResult:
    records: List[ClosedLoopRecord]
    state: PlantState
    error: Optional[str] = None
    traces: List[IterationTrace] = field(default_factory=list, repr=False)

    @property
    def completed(self) -> int:
        return len(self.records)

    @property
    def stage_costs(self) -> np.ndarray:
        return np.array([r.stage_cost for r in self.records])


def _shift_solution(sol: LocalSolution, mg: MicrogridModel) -> LocalSolution:
    uu = mg.split(sol.u)
    shifted = np.concatenate([uu[:, 1:], np.zeros_like(uu[:, :1])], axis=1).reshape(-1)
    return LocalSolution(shifted, mg.aggregate(shifted), float("nan"))


def advance_soc(params: Sequence[BatteryParams], soc: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
    """One step of ``x+ = alpha x + T (beta u_plus + u_minus)`` for every household."""
    alpha = np.array([p.alpha for p in params])
    beta = np.array([p.beta for p in params])
    return alpha * soc + dt * (beta * controls[:, 0] + controls[:, 1])


def run_mpc(
    state: PlantState,
    topology: NetworkTopology,
    reference: Callable[[int], np.ndarray],
    horizon: int,
    steps: int,
    config: Optional[BidirConfig] = None,
    warm_start: bool = True,
    check_feasibility: bool = True,
    keep_traces: bool = False,
    progress: Optional[Callable[[ClosedLoopRecord], None]] = None,
) -> ClosedLoopResult:
    """Simulate ``steps`` closed-loop steps from ``state``.

    Parameters
    ----------
    state : PlantState
        Initial plant state; not modified.
    topology : NetworkTopology
    reference : callable
        Maps the absolute step ``k`` to references of shape ``(M, N)`` for
        steps ``k .. k + N - 1``.
    horizon : int
    steps : int
    config : BidirConfig, optional
    warm_start : bool
        Seed each step with the previous step's shifted schedules and plan.
    check_feasibility : bool
        Abort when an applied move violates its constraints.
    keep_traces : bool
        Keep the inner iteration trace of every step.
    progress : callable, optional
        Called with each finished record.

    Returns
    -------
    ClosedLoopResult
        On a solver failure or infeasible move, the records up to that
        step and an error message.
    """
    cfg = config or BidirConfig()
    st = state.copy()
    length = min(w.shape[1] for w in st.w_actual + st.w_pred)
    if st.k + steps + horizon - 1 > length:
        raise ValueError(f"series of length {length} cannot cover {steps} steps from {st.k} with horizon {horizon}")
    geometry = build_exchange_vectors(topology)
    result = ClosedLoopResult([], st)
    warm = None

    for _ in range(steps):
        t0 = time.perf_counter()
        k = st.k
        try:
            mgs = st.models(horizon)
            zeta = np.asarray(reference(k), dtype=float)
            trace = run_bidirectional(mgs, topology, zeta, cfg, warm=warm)
        except Exception as exc:  # keep what has been simulated so far
            result.error = f"step {k}: {exc}"
            log.error("closed loop aborted at step %d: %s", k, exc)
            break
        if keep_traces:
            result.traces.append(trace)

        feasible = all(mg.constraint_violation(s.u) <= FEAS_TOL for mg, s in zip(mgs, trace.solutions))
        feasible &= trace.plan.violation() <= FEAS_TOL
        delta = trace.plan.delta[0].copy()
        exchange = geometry.a @ delta

        controls, before, viol = [], np.empty(st.n_microgrids), 0.0
        for m, (mg, sol) in enumerate(zip(mgs, trace.solutions)):
            u0 = mg.split(sol.u)[:, 0, :].copy()
            controls.append(u0)
            gamma = mg.gamma
            before[m] = float(np.sum(st.w_actual[m][:, k] + u0[:, 0] + gamma * u0[:, 1]))
            x = advance_soc(st.batteries[m], st.soc[m], u0, st.dt)
            cap = np.array([p.capacity for p in st.batteries[m]])
            viol = max(viol, float(np.max(-x, initial=0.0)), float(np.max(x - cap, initial=0.0)))
            st.soc[m] = np.clip(x, 0.0, cap)
        feasible &= viol <= SOC_TOL
        after = before + exchange
        rec = ClosedLoopRecord(
            k=k, controls=controls, delta=delta,
            demand_before_exchange=before, demand_after_exchange=after,
            reference=zeta[:, 0].copy(), stage_cost=float(np.sum((zeta[:, 0] - after) ** 2)),
            iterations=len(trace.records), plan_cost=trace.cost, feasible=bool(feasible),
            soc_violation=viol, seconds=time.perf_counter() - t0,
        )
        result.records.append(rec)
        if progress is not None:
            progress(rec)
        st.k += 1
        if check_feasibility and not feasible:
            result.error = f"step {k}: applied move infeasible (SoC excursion {viol:.3g})"
            break
        if warm_start:
            warm = WarmStart([_shift_solution(s, mg) for s, mg in zip(trace.solutions, mgs)], trace.plan.shifted())
    return result
