"""
Iterative bidirectional coordination of microgrid operators and the
exchange operator.

Each round hands every microgrid the shifted reference
``zeta_k - Delta_k`` built from the current exchange plan, re-solves the
battery schedules against it, and then re-solves the exchange for the new
aggregated demands. Both phases can only lower the overall cost::

    J(z_bar, delta) = sum_k ||zeta_k - z_bar_k - Delta_k||^2

because the previous schedule and the previous plan stay feasible
candidates. The loop stops when the cost no longer drops by more than the
configured threshold.
"""

import logging
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .lower_level import LocalSolution, SplittingSettings, solve_local_central, solve_local_distributed
from .model import MicrogridModel, NetworkTopology
from .qp import QpSettings
from .upper_level import (
    ExchangeGeometry,
    ExchangePlan,
    build_exchange_vectors,
    exchange_cost,
    net_exchange,
    solve_exchange,
)

log = logging.getLogger(__name__)

CENTRAL = "central"
DISTRIBUTED = "distributed"


@dataclass
class BidirConfig:
    """Stopping rules and solver choices.

    Attributes
    ----------
    ell_max : int
        Maximum number of rounds, the initial one included.
    epsilon : float
        Stop once a round lowers ``J`` by no more than this.
    rel_epsilon : float or None
        Also stop once the drop is at most ``rel_epsilon * J``.
    lower_mode : {"central", "distributed"}
    parallel : bool
        Solve microgrids and exchange steps on a thread pool.
    """

    ell_max: int = 40
    epsilon: float = 0.0
    rel_epsilon: Optional[float] = 1e-5
    lower_mode: str = CENTRAL
    parallel: bool = False
    workers: Optional[int] = None
    qp: QpSettings = field(default_factory=QpSettings)
    splitting: SplittingSettings = field(default_factory=SplittingSettings)

    def __post_init__(self):
        if self.ell_max < 1:
            raise ValueError("ell_max must be at least 1")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.rel_epsilon is not None and not self.rel_epsilon >= 0:
            raise ValueError("rel_epsilon must be non-negative")
        if self.lower_mode not in (CENTRAL, DISTRIBUTED):
            raise ValueError(f"lower_mode must be {CENTRAL!r} or {DISTRIBUTED!r}")


@dataclass
class IterationRecord:
    """One round of the scheme.

    ``cost_before`` is ``J(z_bar^l, delta^(l-1))`` and ``cost_after`` is
    ``J(z_bar^l, delta^l)``. ``zeta_eff`` holds the references the
    microgrids optimized against and ``exchange`` the resulting
    ``Delta^l``.
    """

    ell: int
    cost_before: float
    cost_after: float
    z_bar: np.ndarray
    plan: ExchangePlan
    zeta_eff: np.ndarray
    exchange: np.ndarray
    lower_iterations: int = 0


@dataclass
class IterationTrace:
    """Full history of a run plus its final schedules."""

    baseline_cost: float
    records: List[IterationRecord]
    solutions: List[LocalSolution]
    geometry: ExchangeGeometry
    zeta: np.ndarray
    stop_reason: str = ""

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    @property
    def cost(self) -> float:
        return self.records[-1].cost_after

    @property
    def plan(self) -> ExchangePlan:
        return self.records[-1].plan

    @property
    def z_bar(self) -> np.ndarray:
        return self.records[-1].z_bar

    @property
    def costs_after(self) -> np.ndarray:
        return np.array([r.cost_after for r in self.records])

    @property
    def costs_before(self) -> np.ndarray:
        return np.array([r.cost_before for r in self.records])

    def table(self) -> List[dict]:
        """Rows ``(iteration, before exchange, after exchange)``; row 0 is the baseline."""
        rows = [{"iteration": 0, "before_exchange": self.baseline_cost, "after_exchange": self.baseline_cost}]
        rows += [
            {"iteration": r.ell, "before_exchange": r.cost_before, "after_exchange": r.cost_after}
            for r in self.records
        ]
        return rows


def evaluate_overall_objective(z_bar, plan: ExchangePlan, zeta, geometry: ExchangeGeometry) -> float:
    """``J = sum_k ||zeta_k - (z_bar_k + Delta_k)||^2``.

    ``z_bar`` and ``zeta`` have shape ``(M, N)``.
    """
    y = np.asarray(zeta, dtype=float) - np.asarray(z_bar, dtype=float)
    if y.ndim != 2 or y.shape[0] != geometry.n_microgrids:
        raise ValueError(f"profiles must have shape ({geometry.n_microgrids}, N)")
    if plan.delta.shape != (y.shape[1], geometry.n_directions):
        raise ValueError(f"plan has shape {plan.delta.shape}, expected {(y.shape[1], geometry.n_directions)}")
    return float(exchange_cost(y, plan.delta, geometry).sum())


@dataclass
class WarmStart:
    """Schedules and plan from an earlier run, e.g. the previous MPC step."""

    solutions: Optional[Sequence[Optional[LocalSolution]]] = None
    plan: Optional[ExchangePlan] = None


def run_bidirectional(
    microgrids: Sequence[MicrogridModel],
    topology: NetworkTopology,
    zeta,
    config: Optional[BidirConfig] = None,
    warm: Optional[WarmStart] = None,
    executor: Optional[Executor] = None,
) -> IterationTrace:
    """Run the bidirectional scheme.

    Parameters
    ----------
    microgrids : sequence of MicrogridModel
        One model per microgrid, all with the same horizon ``N``.
    topology : NetworkTopology
    zeta : array_like, shape (M, N)
        Reference profiles.
    config : BidirConfig, optional
    warm : WarmStart, optional
        Initial points for the first round's solvers. Never changes the
        result beyond solver tolerance.
    executor : concurrent.futures.Executor, optional
        Used instead of an internal pool when ``config.parallel`` is set.

    Returns
    -------
    IterationTrace
        Every recorded plan and schedule is feasible; ``cost_after`` is
        non-increasing.
    """
    cfg = config or BidirConfig()
    mgs = list(microgrids)
    M = len(mgs)
    if M != topology.n_microgrids:
        raise ValueError(f"topology has {topology.n_microgrids} microgrids, got {M} models")
    if M == 0:
        raise ValueError("at least one microgrid is required")
    N = mgs[0].horizon
    if any(mg.horizon != N for mg in mgs):
        raise ValueError("all microgrids must share one horizon")
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape != (M, N):
        raise ValueError(f"zeta must have shape {(M, N)}, got {zeta.shape}")
    geometry = build_exchange_vectors(topology)

    own_pool = None
    if cfg.parallel and executor is None:
        own_pool = executor = ThreadPoolExecutor(max_workers=cfg.workers)
    elif not cfg.parallel:
        executor = None
    try:
        return _iterate(mgs, geometry, zeta, cfg, warm or WarmStart(), executor)
    finally:
        if own_pool is not None:
            own_pool.shutdown()


def _solve_lower(mgs, zeta_eff, cfg: BidirConfig, warm, executor) -> List[LocalSolution]:
    def one(k):
        w = None if warm is None else warm[k]
        if cfg.lower_mode == DISTRIBUTED:
            return solve_local_distributed(mgs[k], zeta_eff[k], cfg.splitting, warm=w)
        return solve_local_central(mgs[k], zeta_eff[k], cfg.qp, warm=w)

    if executor is None or len(mgs) == 1:
        return [one(k) for k in range(len(mgs))]
    return list(executor.map(one, range(len(mgs))))


def _exchange(z_bar, zeta, geometry, cfg, prev: ExchangePlan, executor):
    plan, cost = solve_exchange(z_bar, zeta, geometry, cfg.qp, warm=prev, executor=executor)
    # the previous plan is still feasible; keep it if the solver did worse
    prev_cost = evaluate_overall_objective(z_bar, prev, zeta, geometry)
    if prev_cost < cost:
        return prev, prev_cost
    return plan, cost


def _iterate(mgs, geometry, zeta, cfg: BidirConfig, warm: WarmStart, executor) -> IterationTrace:
    M, N = zeta.shape
    z_base = np.array([mg.b for mg in mgs])
    baseline = float(np.sum((zeta - z_base) ** 2))

    # round 1: local optimum against the raw reference, then exchange
    sols = _solve_lower(mgs, zeta, cfg, warm.solutions, executor)
    z_bar = np.array([s.z_bar for s in sols])
    zero = ExchangePlan.zeros(geometry, N)
    cost_before = evaluate_overall_objective(z_bar, zero, zeta, geometry)
    prev = warm.plan if warm.plan is not None and warm.plan.delta.shape == zero.delta.shape else zero
    plan, cost = _exchange(z_bar, zeta, geometry, cfg, prev, executor)
    if cost_before < cost:
        plan, cost = zero, cost_before
    records = [IterationRecord(1, cost_before, cost, z_bar, plan, zeta.copy(),
                               net_exchange(plan, geometry), sum(s.iterations for s in sols))]
    log.debug("round 1: J before %.6g, after %.6g", cost_before, cost)
    trace = IterationTrace(baseline, records, sols, geometry, zeta)

    ell = 1
    while True:
        if ell >= cfg.ell_max:
            trace.stop_reason = "ell_max"
            break
        last = records[-1]
        zeta_eff = zeta - last.exchange
        if np.array_equal(zeta_eff, last.zeta_eff):
            # same references give the same schedules: nothing can change
            trace.stop_reason = "references unchanged"
            break
        sols = _solve_lower(mgs, zeta_eff, cfg, trace.solutions, executor)
        z_bar = np.array([s.z_bar for s in sols])
        cost_before = evaluate_overall_objective(z_bar, last.plan, zeta, geometry)
        plan, cost = _exchange(z_bar, zeta, geometry, cfg, last.plan, executor)
        ell += 1
        records.append(IterationRecord(ell, cost_before, cost, z_bar, plan, zeta_eff,
                                       net_exchange(plan, geometry), sum(s.iterations for s in sols)))
        trace.solutions = sols
        log.debug("round %d: J before %.6g, after %.6g", ell, cost_before, cost)
        drop = last.cost_after - cost
        if drop <= cfg.epsilon:
            trace.stop_reason = "epsilon"
            break
        if cfg.rel_epsilon is not None and drop <= cfg.rel_epsilon * last.cost_after:
            trace.stop_reason = "rel_epsilon"
            break
    return trace


def local_costs(trace: IterationTrace, microgrids: Sequence[MicrogridModel]) -> np.ndarray:
    """``g_k(u_k; zeta_k - Delta_k)`` of the final round, one entry per microgrid.

    Their sum equals the final overall cost.
    """
    z_eff = trace.zeta - trace.final.exchange
    return np.array([
        float(np.sum((mg.aggregate(s.u) - z_eff[k]) ** 2))
        for k, (mg, s) in enumerate(zip(microgrids, trace.solutions))
    ])
