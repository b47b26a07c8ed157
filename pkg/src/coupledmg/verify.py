"""
Self-checks run by ``coupledmg verify``.

Each suite builds its own instances from a seed, compares the library
against an independent formulation (a joint QP, a brute-force oracle or a
closed-form value) and returns one :class:`CheckResult` per suite.
"""

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .coordinator import BidirConfig, evaluate_overall_objective, run_bidirectional
from .data_io import example1_scenario
from .lower_level import TIKHONOV, solve_local_central, solve_local_distributed
from .model import BatteryParams, MicrogridModel, NetworkTopology, build_microgrid_model
from .qp import QpProblem, QpSettings, solve_qp
from .upper_level import TIE_BREAK, ExchangeGeometry, ExchangePlan, build_exchange_vectors, solve_exchange


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def random_battery(rng: np.random.Generator, p_empty: float = 0.15) -> Tuple[BatteryParams, float]:
    """Random battery and admissible SoC; some households have none."""
    if rng.random() < p_empty:
        return BatteryParams.no_battery(), 0.0
    C = float(rng.uniform(0.5, 3.0))
    p = BatteryParams(
        alpha=float(rng.uniform(0.95, 1.0)), beta=float(rng.uniform(0.85, 1.0)),
        gamma=float(rng.uniform(0.85, 1.0)), capacity=C,
        u_min=-float(rng.uniform(0.0, 1.0)) * C, u_max=float(rng.uniform(0.0, 1.0)) * C,
    )
    return p, float(rng.uniform(0.0, C))


def random_microgrid(rng: np.random.Generator, households: int, horizon: int, dt: float = 0.25) -> MicrogridModel:
    drawn = [random_battery(rng) for _ in range(households)]
    w = rng.normal(0.5, 1.0, (households, horizon))
    return build_microgrid_model([d[0] for d in drawn], horizon, dt, [d[1] for d in drawn], w)


def random_topology(rng: np.random.Generator, M: int, p_line: float = 0.7) -> NetworkTopology:
    lam = np.zeros((M, M))
    eta = np.zeros((M, M))
    for k in range(M):
        for v in range(k + 1, M):
            if rng.random() < p_line:
                lam[k, v] = lam[v, k] = rng.uniform(0.2, 2.0)
                eta[k, v] = eta[v, k] = rng.uniform(0.7, 1.0)
    return NetworkTopology.from_matrices(lam, eta)


def random_instance(rng: np.random.Generator, M: int, N: int, I: int):
    """``(microgrids, topology, zeta)`` with ``I`` households per microgrid."""
    mgs = [random_microgrid(rng, I, N) for _ in range(M)]
    zeta = rng.normal(0.5 * I, 1.0, (M, N))
    return mgs, random_topology(rng, M), zeta


def joint_problem(mgs: Sequence[MicrogridModel], geometry: ExchangeGeometry, zeta) -> QpProblem:
    """Problem over all controls and exchange fractions as one dense QP.

    Variables are the stacked controls of every microgrid followed by
    ``delta`` step by step. Tie-breaks match the ones of the levels.
    """
    zeta = np.asarray(zeta, dtype=float)
    M, N = zeta.shape
    nu = [mg.n_controls for mg in mgs]
    nd = geometry.n_directions * N
    n = sum(nu) + nd
    R = np.zeros((M * N, n))
    s = np.zeros(M * N)
    off = 0
    for k, mg in enumerate(mgs):
        R[k * N:(k + 1) * N, off:off + nu[k]] = mg.A
        R[k * N:(k + 1) * N, sum(nu):] = np.kron(np.eye(N), geometry.a[k][None, :])
        s[k * N:(k + 1) * N] = mg.b - zeta[k]
        off += nu[k]
    reg = np.concatenate([np.full(sum(nu), TIKHONOV), np.full(nd, TIE_BREAK)])
    P = 2.0 * (R.T @ R + np.diag(reg))
    rows, lo, hi = [], [], []
    off = 0
    for k, mg in enumerate(mgs):
        block = np.zeros((mg.D.shape[0], n))
        block[:, off:off + nu[k]] = mg.D
        rows.append(block)
        lo.append(np.full(mg.D.shape[0], -np.inf))
        hi.append(mg.d)
        off += nu[k]
    if nd:
        G, l, h = geometry.constraints()
        block = np.zeros((N * G.shape[0], n))
        block[:, sum(nu):] = np.kron(np.eye(N), G)
        rows.append(block)
        lo.append(np.tile(l, N))
        hi.append(np.tile(h, N))
    return QpProblem(P, 2.0 * R.T @ s, np.vstack(rows), np.concatenate(hi), c=float(s @ s), l=np.concatenate(lo))


def joint_objective(mgs: Sequence[MicrogridModel], geometry: ExchangeGeometry, zeta, x) -> float:
    """Overall cost ``J`` (no tie-breaks) at a point of :func:`joint_problem`."""
    zeta = np.asarray(zeta, dtype=float)
    N = zeta.shape[1]
    off, z_bar = 0, []
    for mg in mgs:
        z_bar.append(mg.aggregate(x[off:off + mg.n_controls]))
        off += mg.n_controls
    plan = ExchangePlan(x[off:].reshape(N, geometry.n_directions), geometry.directions)
    return evaluate_overall_objective(np.array(z_bar), plan, zeta, geometry)


def joint_exchange_problem(z_bar, zeta, geometry: ExchangeGeometry) -> QpProblem:
    """The exchange problem over the whole horizon as one QP."""
    y = np.asarray(zeta, dtype=float) - np.asarray(z_bar, dtype=float)
    N = y.shape[1]
    A = np.kron(np.eye(N), geometry.a)  # rows ordered (step, microgrid)
    r = y.T.reshape(-1)
    G, l, h = geometry.constraints()
    P = 2.0 * (A.T @ A + TIE_BREAK * np.eye(A.shape[1]))
    return QpProblem(P, -2.0 * A.T @ r, np.kron(np.eye(N), G), np.tile(h, N), c=float(r @ r), l=np.tile(l, N))


def box_qp_oracle(P, q, lo, hi, points: int = 41, sweeps: int = 100_000) -> np.ndarray:
    """Minimizer of ``1/2 x'Px + q'x`` over a box by grid search plus refinement.

    The best grid point seeds exact coordinate-wise minimization, which
    converges for positive definite ``P``.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    axes = [np.linspace(a, b, points) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(q))
    vals = 0.5 * np.einsum("ki,ij,kj->k", grid, P, grid) + grid @ q
    x = grid[np.argmin(vals)].copy()
    for _ in range(sweeps):
        old = x.copy()
        for i in range(len(q)):
            rest = q[i] + P[i] @ x - P[i, i] * x[i]
            x[i] = np.clip(-rest / P[i, i], lo[i], hi[i])
        if np.abs(x - old).max() <= 1e-15:
            break
    return x


def _timed(name: str, fn: Callable[[], Tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing suite is a failed suite
        ok, detail = False, f"error: {exc}"
    return CheckResult(name, ok, detail, time.perf_counter() - t0)


def check_example1() -> Tuple[bool, str]:
    sc = example1_scenario()
    mgs = [build_microgrid_model(b, sc.horizon, sc.dt, s, w) for b, s, w in zip(sc.batteries, sc.soc, sc.w_pred)]
    trace = run_bidirectional(mgs, sc.topology, sc.references(0))
    geometry = build_exchange_vectors(sc.topology)
    # single-step fixed point of the superseded exchange model
    old = evaluate_overall_objective(
        np.array([[-5.0], [-5.0], [5.0], [5.0]]), ExchangePlan.zeros(geometry, 1), np.zeros((4, 1)), geometry,
    )
    ok = abs(trace.cost) <= 1e-6 and abs(old - 100.0) <= 1e-12
    return ok, f"final J = {trace.cost:.3g}, superseded model J = {old:g}"


def check_descent(seeds: int = 100, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst, infeasible = -np.inf, 0
    for _ in range(seeds):
        M, N, I = int(rng.integers(2, 5)), int(rng.integers(2, 7)), int(rng.integers(1, 4))
        mgs, top, zeta = random_instance(rng, M, N, I)
        trace = run_bidirectional(mgs, top, zeta, BidirConfig(ell_max=30, epsilon=0.0, rel_epsilon=None))
        J = np.concatenate([[trace.records[0].cost_before], trace.costs_after])
        worst = max(worst, float(np.max(np.diff(J) - (1e-9 * J[:-1] + 1e-9), initial=-np.inf)))
        for r in trace.records:
            infeasible += r.plan.violation() > 1e-8
        infeasible += sum(mg.constraint_violation(s.u) > 1e-8 for mg, s in zip(mgs, trace.solutions))
    ok = worst <= 0 and infeasible == 0
    return ok, f"{seeds} runs, largest increase over slack {worst:.3g}, infeasible iterates {infeasible}"


def check_separability(instances: int = 20, seed: int = 1) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        M, N = int(rng.integers(2, 5)), int(rng.integers(1, 6))
        top = random_topology(rng, M, 0.8)
        geometry = build_exchange_vectors(top)
        z_bar, zeta = rng.normal(0, 2, (M, N)), rng.normal(0, 2, (M, N))
        _, J = solve_exchange(z_bar, zeta, geometry)
        if geometry.n_directions == 0:
            continue
        sol = solve_qp(joint_exchange_problem(z_bar, zeta, geometry))
        worst = max(worst, abs(J - sol.value))
    return worst <= 1e-6, f"{instances} instances, largest |J_steps - J_joint| = {worst:.3g}"


def check_distributed(instances: int = 20, seed: int = 2) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        mg = random_microgrid(rng, int(rng.integers(1, 5)), int(rng.integers(2, 7)))
        zeta = mg.b + rng.normal(0, 1, mg.horizon)
        c = solve_local_central(mg, zeta).objective
        d = solve_local_distributed(mg, zeta).objective
        worst = max(worst, abs(d - c) / max(abs(c), 1e-9))
    return worst <= 1e-4, f"{instances} instances, largest relative gap {worst:.3g}"


def check_optimality(instances: int = 20, seed: int = 3) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst, excess, done = 0.0, -np.inf, 0
    while done < instances:
        M, N, I = int(rng.integers(2, 5)), int(rng.integers(2, 7)), int(rng.integers(1, 4))
        mgs, top, zeta = random_instance(rng, M, N, I)
        geometry = build_exchange_vectors(top)
        if 2 * N * I * M + geometry.n_directions * N > 200:
            continue
        done += 1
        trace = run_bidirectional(mgs, top, zeta, BidirConfig(ell_max=500, epsilon=0.0, rel_epsilon=None))
        sol = solve_qp(joint_problem(mgs, geometry, zeta))
        if not sol.solved:
            return False, f"joint QP not solved: {sol.status}"
        ref = joint_objective(mgs, geometry, zeta, sol.x)
        # relative gap with an absolute floor for instances whose optimum is zero
        excess = max(excess, abs(trace.cost - ref) - (1e-4 * abs(ref) + 1e-9))
        if abs(ref) > 1e-6:
            worst = max(worst, abs(trace.cost - ref) / abs(ref))
    return excess <= 0, (f"{instances} instances, largest relative gap {worst:.3g} (|J*| > 1e-6), "
                         f"largest |J - J*| - (1e-4 |J*| + 1e-9) = {excess:.3g}")


def check_qp(instances: int = 50, seed: int = 4) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_x, worst_v = 0.0, 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 4))
        B = rng.normal(size=(n, n))
        P = B @ B.T + 0.1 * np.eye(n)
        q = rng.normal(0, 2, n)
        lo = -rng.uniform(0.1, 2.0, n)
        hi = rng.uniform(0.1, 2.0, n)
        sol = solve_qp(QpProblem(P, q, np.eye(n), hi, l=lo))
        x = box_qp_oracle(P, q, lo, hi)
        v = 0.5 * x @ P @ x + q @ x
        worst_x = max(worst_x, float(np.abs(sol.x - x).max()))
        worst_v = max(worst_v, abs(sol.value - v) / max(abs(v), 1.0))
    ok = bool(worst_x <= 1e-3 and worst_v <= 1e-6)
    return ok, f"{instances} instances, max |x - x_oracle| = {worst_x:.3g}, max relative value gap {worst_v:.3g}"


SUITES: Dict[str, Callable[[], Tuple[bool, str]]] = {
    "example1": check_example1,
    "descent": check_descent,
    "separability": check_separability,
    "distributed": check_distributed,
    "optimality": check_optimality,
    "qp": check_qp,
}


def run_suites(names: Optional[Sequence[str]] = None, seeds: Optional[int] = None) -> List[CheckResult]:
    """Run the named suites (all by default).

    Raises
    ------
    KeyError
        For an unknown suite name; the message lists the available ones.
    """
    names = list(SUITES) if not names or list(names) == ["all"] else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite {unknown[0]!r}; available: {', '.join(SUITES)}, all")
    out = []
    for name in names:
        fn = SUITES[name]
        if name == "descent" and seeds is not None:
            out.append(_timed(name, lambda: check_descent(seeds)))
        else:
            out.append(_timed(name, fn))
    return out
