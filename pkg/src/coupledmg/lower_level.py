"""
Battery scheduling within one microgrid.

The microgrid operator minimizes ``g(u; zeta) = ||A u + b - zeta||^2`` over
``D u <= d``. A ``1e-8 ||u||^2`` term selects the smallest actuation among
controls with the same aggregated demand.

Small microgrids are solved as one dense QP with :mod:`coupledmg.qp`.
Large ones go to a structured interior-point kernel that keeps SoC
trajectories as variables; see :mod:`coupledmg._household_ipm`. First-order
splitting is not competitive there: the objective only sees the ``N``
aggregate directions of a ``2 N I`` dimensional control space and needs
tens of thousands of iterations to converge.
"""

from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ._household_ipm import solve_household_qp
from .model import MicrogridModel
from .qp import MAX_ITER, SOLVED, QpProblem, QpSettings, solve_qp

# weight of the minimum-actuation tie-break
TIKHONOV = 1e-8

# microgrids with more controls than this use the structured solver
DENSE_LIMIT = 400

# feasibility tolerance for local solutions
FEAS_TOL = 1e-8

# interior-point target accuracy, accepted accuracy and iteration cap
IPM_TOL = 1e-9
IPM_ACCEPT = 1e-6
IPM_MAX_ITER = 200


@dataclass
class LocalSolution:
    """Optimal schedule of one microgrid for a given reference."""

    u: np.ndarray
    z_bar: np.ndarray
    objective: float
    iterations: int = 0
    status: str = SOLVED
    y: Optional[np.ndarray] = field(default=None, repr=False)


def aggregate_demand(profiles) -> np.ndarray:
    """Sum household demand profiles of equal length."""
    profiles = [np.asarray(p, dtype=float) for p in profiles]
    if not profiles:
        raise ValueError("no profiles to aggregate")
    length = profiles[0].shape
    for k, p in enumerate(profiles):
        if p.shape != length:
            raise ValueError(f"profile {k} has shape {p.shape}, expected {length}")
    return np.sum(profiles, axis=0)


def local_objective(mg: MicrogridModel, u, zeta_eff) -> float:
    """``g(u; zeta_eff)`` without the tie-break term."""
    r = mg.aggregate(u) - np.asarray(zeta_eff, dtype=float)
    return float(r @ r)


def local_qp(mg: MicrogridModel, zeta_eff) -> QpProblem:
    """Dense QP data of the local problem (including the tie-break)."""
    A = mg.A
    r0 = mg.b - np.asarray(zeta_eff, dtype=float)
    P = 2.0 * (A.T @ A + TIKHONOV * np.eye(mg.n_controls))
    return QpProblem(P, 2.0 * A.T @ r0, mg.D, mg.d, c=float(r0 @ r0))


def _check_reference(mg: MicrogridModel, zeta_eff) -> np.ndarray:
    zeta_eff = np.asarray(zeta_eff, dtype=float)
    if zeta_eff.shape != (mg.horizon,):
        raise ValueError(f"reference must have length {mg.horizon}, got shape {zeta_eff.shape}")
    if not np.isfinite(zeta_eff).all():
        raise ValueError("reference must be finite")
    return zeta_eff


def _battery_arrays(mg: MicrogridModel):
    P = mg.params
    lo = np.array([p.effective_bounds[0] for p in P], dtype=float)
    hi = np.array([p.effective_bounds[1] for p in P], dtype=float)
    return (
        np.array([p.alpha for p in P], dtype=float),
        np.array([p.beta for p in P], dtype=float),
        np.array([p.gamma for p in P], dtype=float),
        np.array([p.capacity for p in P], dtype=float),
        hi,
        -lo,
    )


def solve_structured(mg: MicrogridModel, zeta_eff, tol: float = IPM_TOL, eps: float = TIKHONOV):
    """Run the interior-point kernel; returns ``(u, iterations, status)``.

    ``eps`` is the weight of the tie-break ``eps ||u||^2`` next to the
    tracking term ``||A u + b - zeta_eff||^2``.
    """
    alpha, beta, gamma, cap, hi, mx = _battery_arrays(mg)
    c = np.asarray(zeta_eff, dtype=float) - mg.b
    p, m, iters, ok = solve_household_qp(
        alpha, beta, gamma, cap, hi, mx, mg.soc.astype(float), c, float(mg.dt), eps, tol, max(tol, IPM_ACCEPT), IPM_MAX_ITER
    )
    u = np.stack([p, -m], axis=-1).reshape(-1)
    return u, int(iters), SOLVED if ok else MAX_ITER


def solve_local_central(
    mg: MicrogridModel,
    zeta_eff,
    settings: Optional[QpSettings] = None,
    warm: Optional[LocalSolution] = None,
) -> LocalSolution:
    """Minimize ``||A u + b - zeta_eff||^2`` over ``D u <= d`` with one QP solve.

    Parameters
    ----------
    mg : MicrogridModel
    zeta_eff : array_like, shape (N,)
        Effective reference of the microgrid.
    settings : QpSettings, optional
        Used by the dense path only.
    warm : LocalSolution, optional
        Previous solution. Seeds the dense solver; on both paths the result
        is never worse than a feasible warm start.

    Returns
    -------
    LocalSolution
        Feasible to within ``FEAS_TOL`` (after
        :meth:`MicrogridModel.clip_to_limits`).
    """
    zeta_eff = _check_reference(mg, zeta_eff)
    if mg.n_controls == 0:
        return LocalSolution(np.zeros(0), mg.b.copy(), local_objective(mg, np.zeros(0), zeta_eff))
    y = None
    if mg.n_controls <= DENSE_LIMIT:
        x0 = None if warm is None else warm.u
        y0 = None if warm is None else warm.y
        sol = solve_qp(local_qp(mg, zeta_eff), settings, x0=x0, y0=y0)
        u_raw, iters, status, y = sol.x, sol.iterations, sol.status, sol.y
    else:
        u_raw, iters, status = solve_structured(mg, zeta_eff)
    u = mg.clip_to_limits(u_raw)
    out = LocalSolution(u, mg.aggregate(u), local_objective(mg, u, zeta_eff), iters, status, y)
    return _no_worse_than(mg, out, warm, zeta_eff)


def _no_worse_than(mg, out: LocalSolution, warm: Optional[LocalSolution], zeta_eff) -> LocalSolution:
    # keeps the outer descent exact despite solver tolerances
    if warm is None or warm.u.shape != out.u.shape:
        return out
    if mg.constraint_violation(warm.u) > FEAS_TOL:
        return out
    g_warm = local_objective(mg, warm.u, zeta_eff)
    if g_warm < out.objective:
        return LocalSolution(warm.u.copy(), mg.aggregate(warm.u), g_warm, out.iterations, out.status, warm.y)
    return out


@dataclass
class SplittingSettings:
    """Consensus splitting across households.

    ``rho`` is the initial penalty. It is adapted by residual balancing:
    scaled by ``tau`` whenever one residual exceeds ``mu`` times the other.
    """

    rho: float = 1.0
    mu: float = 10.0
    tau: float = 2.0
    # household QPs are solved to about 1e-8; consensus cannot be tighter
    eps_abs: float = 1e-8
    eps_rel: float = 1e-7
    max_iter: int = 5000
    qp: QpSettings = field(default_factory=QpSettings)


def solve_local_distributed(
    mg: MicrogridModel,
    zeta_eff,
    settings: Optional[SplittingSettings] = None,
    warm: Optional[LocalSolution] = None,
    executor: Optional[Executor] = None,
) -> LocalSolution:
    """Solve the local problem by sharing ADMM over households.

    Household ``i`` owns its demand contribution ``x_i = A_i u_i`` and
    repeatedly solves a private QP that pulls ``x_i`` towards a target
    built from the shared aggregate. The aggregate update is closed form.

    Parameters
    ----------
    mg : MicrogridModel
    zeta_eff : array_like, shape (N,)
    settings : SplittingSettings, optional
    warm : LocalSolution, optional
        Initial household controls.
    executor : concurrent.futures.Executor, optional
        Runs the household subproblems of one iteration concurrently.

    Returns
    -------
    LocalSolution
        ``status`` is ``"max-iterations"`` when the residuals did not reach
        tolerance; ``u`` is then the last iterate made feasible.
    """
    s = settings or SplittingSettings()
    zeta_eff = _check_reference(mg, zeta_eff)
    I, N = mg.n_systems, mg.horizon
    n = 2 * N
    c0 = zeta_eff - mg.b  # target for sum_i x_i

    gamma = mg.gamma
    Ai = np.zeros((I, N, n))
    Ai[:, np.arange(N), 2 * np.arange(N)] = 1.0
    Ai[:, np.arange(N), 2 * np.arange(N) + 1] = gamma[:, None]
    movable = np.array([p.effective_bounds != (0.0, 0.0) for p in mg.params], dtype=bool)

    U = np.zeros((I, n)) if warm is None else mg.split(warm.u).reshape(I, n).copy()
    X = np.einsum("ink,ik->in", Ai, U)
    xbar = X.mean(axis=0)
    zbar = xbar.copy()
    w = np.zeros(N)
    duals: List[Optional[np.ndarray]] = [None] * I
    rho = s.rho
    iters = 0
    status = MAX_ITER
    # households too large for the dense solver use the structured kernel with I = 1
    singles = [_single_household(mg, i) for i in range(I)] if n > DENSE_LIMIT // 4 else None

    def household(i, target, rho):
        # (rho/2) ||A_i u - target||^2 + eps ||u||^2 over household i's constraints
        if singles is not None:
            u, _, _ = solve_structured(singles[i], target, eps=2.0 * TIKHONOV / rho)
            return u, None
        P = rho * Ai[i].T @ Ai[i] + 2.0 * TIKHONOV * np.eye(n)
        q = -rho * Ai[i].T @ target
        sol = solve_qp(QpProblem(P, q, mg.D_blocks[i], mg.d_blocks[i]), s.qp, x0=U[i], y0=duals[i])
        return sol.x, sol.y

    for k in range(1, s.max_iter + 1):
        iters = k
        targets = X - xbar + zbar - w
        idx = np.flatnonzero(movable)
        if executor is not None and len(idx) > 1:
            results = list(executor.map(lambda i: household(i, targets[i], rho), idx))
        else:
            results = [household(i, targets[i], rho) for i in idx]
        for i, (u_i, y_i) in zip(idx, results):
            U[i] = u_i
            duals[i] = y_i
        X_old, xbar_old = X, xbar
        X = np.einsum("ink,ik->in", Ai, U)
        xbar = X.mean(axis=0)
        zbar_old = zbar
        # argmin ||I z - c0||^2 + (I rho / 2) ||z - v||^2
        v = xbar + w
        zbar = (2.0 * c0 + rho * v) / (2.0 * I + rho)
        w = w + xbar - zbar

        r_prim = np.sqrt(I) * np.linalg.norm(xbar - zbar)
        # change of the per-household consensus variables x_i - xbar + zbar
        r_dual = rho * np.linalg.norm((X - xbar + zbar) - (X_old - xbar_old + zbar_old))
        eps_p = s.eps_abs * np.sqrt(N) + s.eps_rel * max(np.linalg.norm(X), np.sqrt(I) * np.linalg.norm(zbar))
        eps_d = s.eps_abs * np.sqrt(N) + s.eps_rel * rho * np.sqrt(I) * np.linalg.norm(w)
        if not movable.any() or (r_prim <= eps_p and r_dual <= eps_d):
            status = SOLVED
            break
        if r_prim > s.mu * r_dual:
            rho *= s.tau
            w /= s.tau
        elif r_dual > s.mu * r_prim:
            rho /= s.tau
            w *= s.tau

    u = mg.clip_to_limits(U.reshape(-1))
    out = LocalSolution(u, mg.aggregate(u), local_objective(mg, u, zeta_eff), iters, status)
    return _no_worse_than(mg, out, warm, zeta_eff)


def _single_household(mg: MicrogridModel, i: int) -> MicrogridModel:
    # zero baseline: the household subproblem tracks its own contribution only
    return MicrogridModel(
        params=[mg.params[i]],
        soc=mg.soc[i:i + 1],
        w=np.zeros((1, mg.horizon)),
        horizon=mg.horizon,
        dt=mg.dt,
        D_blocks=mg.D_blocks[i:i + 1],
        d_blocks=mg.d_blocks[i:i + 1],
        soc_maps=mg.soc_maps[i:i + 1],
    )
