"""
Power exchange between microgrids.

A plan holds, for every line ``(k, v)`` in the network and every step, the
fractions ``delta_kv`` and ``delta_vk`` of the line limit sent in either
direction. Microgrid ``k`` sees the net exchange::

    Delta_k(n) = sum_v lambda_kv * (delta_kv(n) - eta_vk * delta_vk(n)) = a_k' delta(n)

Sending raises the sender's demand by the full amount; the receiver's
demand drops by what arrives after losses. The cost
``sum_k ||y_k - Delta_k||^2`` with residuals ``y_k = zeta_k - z_bar_k``
separates over steps, so the horizon is solved as ``N`` small QPs sharing
one Hessian.
"""

import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .model import NetworkTopology
from .qp import MAX_ITER, SOLVED, QpProblem, QpSettings, solve_qp, solve_qp_batch

log = logging.getLogger(__name__)

# weight of the minimum-flow tie-break
TIE_BREAK = 1e-8

# residual bound for accepting an exchange QP that ran out of iterations;
# the optimum is often non-unique up to the tie-break and ADMM stalls there
ACCEPT_RESIDUAL = 1e-5


@dataclass(frozen=True)
class ExchangeGeometry:
    """Exchange vectors of a network.

    Attributes
    ----------
    edges : tuple of (int, int)
        Lines ``(k, v)`` with ``k < v`` in lexicographic order.
    directions : tuple of (int, int)
        Directed components ``(sender, receiver)``: each edge contributes
        ``(k, v)`` then ``(v, k)``.
    a : ndarray, shape (M, 2 |E|)
        Row ``k`` is ``a_k``.
    """

    edges: Tuple[Tuple[int, int], ...]
    directions: Tuple[Tuple[int, int], ...]
    a: np.ndarray

    @property
    def n_microgrids(self) -> int:
        return self.a.shape[0]

    @property
    def n_directions(self) -> int:
        return self.a.shape[1]

    def constraints(self):
        """``(G, l, h)`` with ``delta >= 0`` and one budget row per edge."""
        nd = self.n_directions
        ne = len(self.edges)
        S = np.zeros((ne, nd))
        S[np.arange(ne), 2 * np.arange(ne)] = 1.0
        S[np.arange(ne), 2 * np.arange(ne) + 1] = 1.0
        G = np.vstack([np.eye(nd), S])
        l = np.concatenate([np.zeros(nd), np.full(ne, -np.inf)])
        h = np.concatenate([np.full(nd, np.inf), np.ones(ne)])
        return G, l, h

    def hessian(self) -> np.ndarray:
        """``2 sum_k a_k a_k'`` plus the tie-break."""
        return 2.0 * (self.a.T @ self.a + TIE_BREAK * np.eye(self.n_directions))


def build_exchange_vectors(topology: NetworkTopology) -> ExchangeGeometry:
    """Exchange vectors ``a_k`` for every microgrid of ``topology``."""
    lam, eta = topology.line_limits, topology.efficiencies
    M = topology.n_microgrids
    edges = tuple(topology.edges)
    directions = []
    a = np.zeros((M, 2 * len(edges)))
    for j, (k, v) in enumerate(edges):
        directions += [(k, v), (v, k)]
        # component 2j carries k -> v, component 2j + 1 carries v -> k
        a[k, 2 * j] = lam[k, v]
        a[v, 2 * j] = -eta[k, v] * lam[k, v]
        a[v, 2 * j + 1] = lam[v, k]
        a[k, 2 * j + 1] = -eta[v, k] * lam[v, k]
    a.setflags(write=False)
    return ExchangeGeometry(edges, tuple(directions), a)


@dataclass
class ExchangePlan:
    """Exchange fractions ``delta`` with shape ``(N, 2 |E|)``.

    Column order follows :attr:`ExchangeGeometry.directions`.
    """

    delta: np.ndarray
    directions: Tuple[Tuple[int, int], ...]

    @classmethod
    def zeros(cls, geometry: ExchangeGeometry, horizon: int) -> "ExchangePlan":
        return cls(np.zeros((horizon, geometry.n_directions)), geometry.directions)

    @property
    def horizon(self) -> int:
        return self.delta.shape[0]

    def flow(self, sender: int, receiver: int) -> np.ndarray:
        """Series ``delta_{sender, receiver}``."""
        try:
            j = self.directions.index((sender, receiver))
        except ValueError:
            raise KeyError(f"no line between {sender} and {receiver}") from None
        return self.delta[:, j]

    def violation(self) -> float:
        """Largest violation of ``delta >= 0`` and the per-edge budget."""
        if self.delta.size == 0:
            return 0.0
        neg = float(np.max(-self.delta, initial=0.0))
        pair = self.delta[:, 0::2] + self.delta[:, 1::2]
        return max(neg, float(np.max(pair - 1.0, initial=0.0)), 0.0)

    def shifted(self) -> "ExchangePlan":
        """Drop the first step and repeat the last one (receding horizon)."""
        if self.horizon == 0:
            return self
        return ExchangePlan(np.vstack([self.delta[1:], self.delta[-1:]]), self.directions)


def project_plan(delta: np.ndarray) -> np.ndarray:
    """Clip solver output onto ``delta >= 0`` and ``delta_kv + delta_vk <= 1``."""
    delta = np.maximum(np.asarray(delta, dtype=float), 0.0)
    if delta.shape[-1] == 0:
        return delta
    pair = delta[..., 0::2] + delta[..., 1::2]
    over = np.maximum(pair, 1.0)
    delta[..., 0::2] /= over
    delta[..., 1::2] /= over
    return delta


def exchange_cost(y: np.ndarray, delta: np.ndarray, geometry: ExchangeGeometry) -> np.ndarray:
    """Per-step cost ``sum_k (y_k(n) - a_k' delta(n))^2``.

    ``y`` has shape ``(M, N)``, ``delta`` shape ``(N, 2 |E|)``.
    """
    r = np.asarray(y, dtype=float) - geometry.a @ np.asarray(delta, dtype=float).T
    return np.sum(r * r, axis=0)


def net_exchange(plan: ExchangePlan, geometry: ExchangeGeometry) -> np.ndarray:
    """``Delta_k(n) = a_k' delta(n)`` as an array of shape ``(M, N)``."""
    return geometry.a @ plan.delta.T


def solve_exchange_step(y, geometry: ExchangeGeometry, settings: Optional[QpSettings] = None, warm=None):
    """Optimal exchange at one step.

    Parameters
    ----------
    y : array_like, shape (M,)
        Residuals ``zeta_k(n) - z_bar_k(n)``.
    geometry : ExchangeGeometry
    settings : QpSettings, optional
    warm : array_like, optional
        Initial ``delta``.

    Returns
    -------
    delta : ndarray, shape (2 |E|,)
    value : float
        ``J_n`` at ``delta`` (without the tie-break).
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (geometry.n_microgrids,):
        raise ValueError(f"expected {geometry.n_microgrids} residuals, got shape {y.shape}")
    if geometry.n_directions == 0:
        return np.zeros(0), float(y @ y)
    G, l, h = geometry.constraints()
    problem = QpProblem(geometry.hessian(), -2.0 * geometry.a.T @ y, G, h, c=float(y @ y), l=l)
    sol = solve_qp(problem, settings, x0=warm)
    if not _acceptable(sol):
        raise RuntimeError(f"exchange QP: {sol.status}")
    delta = project_plan(sol.x)
    return delta, float(exchange_cost(y[:, None], delta[None], geometry)[0])


def solve_exchange(
    z_bar,
    zeta,
    geometry: ExchangeGeometry,
    settings: Optional[QpSettings] = None,
    warm: Optional[ExchangePlan] = None,
    executor: Optional[Executor] = None,
    chunks: int = 4,
):
    """Optimal exchange plan over the horizon.

    The per-step QPs are independent. They are solved as one batch, or in
    ``chunks`` batches on ``executor``; each step keeps its own step size
    and stopping test, so batching does not couple the steps.

    Parameters
    ----------
    z_bar, zeta : array_like, shape (M, N)
        Aggregated demands and references per microgrid.
    geometry : ExchangeGeometry
    settings : QpSettings, optional
    warm : ExchangePlan, optional
        Previous plan used as the initial point.
    executor : concurrent.futures.Executor, optional

    Returns
    -------
    plan : ExchangePlan
    value : float
        ``J(z_bar, delta) = sum_k ||zeta_k - z_bar_k - Delta_k||^2``.
    """
    z_bar = np.asarray(z_bar, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if z_bar.shape != zeta.shape or z_bar.ndim != 2 or z_bar.shape[0] != geometry.n_microgrids:
        raise ValueError(f"profiles must have shape ({geometry.n_microgrids}, N), got {z_bar.shape} and {zeta.shape}")
    y = zeta - z_bar
    N = y.shape[1]
    if geometry.n_directions == 0 or N == 0:
        plan = ExchangePlan.zeros(geometry, N)
        return plan, float(np.sum(y * y))

    P = geometry.hessian()
    G, l, h = geometry.constraints()
    Q = -2.0 * geometry.a.T @ y
    X0 = None if warm is None else warm.delta.T
    if executor is None or chunks <= 1 or N < 2 * chunks:
        sols = solve_qp_batch(P, G, h, Q, settings, X0=X0, l=l)
    else:
        parts = np.array_split(np.arange(N), chunks)

        def run(idx):
            return solve_qp_batch(P, G, h, Q[:, idx], settings, X0=None if X0 is None else X0[:, idx], l=l)

        sols = [s for part in executor.map(run, parts) for s in part]
    failed = [n for n, s in enumerate(sols) if not _acceptable(s)]
    if failed:
        raise RuntimeError(f"exchange QP at step {failed[0]}: {sols[failed[0]].status}")
    delta = project_plan(np.stack([s.x for s in sols]))
    plan = ExchangePlan(delta, geometry.directions)
    return plan, float(exchange_cost(y, delta, geometry).sum())


def _acceptable(sol) -> bool:
    if sol.status == SOLVED:
        return True
    ok = sol.status == MAX_ITER and max(sol.primal_residual, sol.dual_residual) <= ACCEPT_RESIDUAL
    ok = ok and bool(np.isfinite(sol.x).all())
    if ok:
        log.debug("accepting exchange step with residuals %.2g, %.2g", sol.primal_residual, sol.dual_residual)
    return ok


def live_opposite_residuals(y: np.ndarray, geometry: ExchangeGeometry) -> List[Tuple[int, int, int]]:
    """Steps and lines ``(n, k, v)`` whose endpoint residuals have opposite signs."""
    out = []
    for k, v in geometry.edges:
        for n in np.flatnonzero(y[k] * y[v] < 0):
            out.append((int(n), k, v))
    return out
