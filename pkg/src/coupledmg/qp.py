"""
Dense convex QP solver based on operator splitting.

Solves::

    minimize    1/2 x' P x + q' x
    subject to  l <= G x <= h

(``l`` defaults to ``-inf``, i.e. ``G x <= h``) with the ADMM iteration
popularized by OSQP: over-relaxed alternating projections onto the
constraint box, adaptive step size, and an active-set polishing step that
turns a moderately accurate iterate into a solution of the KKT system.
Dense data is equilibrated (modified Ruiz scaling) before iterating;
stopping tests and polishing always use the original data.

Problems sharing ``P``, ``G`` and the bounds that differ only in ``q`` are
solved column-wise by :func:`solve_qp_batch`. Each column keeps its own step
size and stops independently, so its result does not depend on the rest of
the batch.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg

SOLVED = "solved"
MAX_ITER = "max-iterations"
INFEASIBLE = "infeasible"

# step size multiplier on rows with l == h
EQUALITY_RHO_SCALE = 1e3


@dataclass
class QpProblem:
    """Data of ``min 1/2 x'Px + q'x + c  s.t.  l <= Gx <= h``.

    ``P`` and ``G`` are usually dense arrays. Structured callers may pass
    any objects supporting ``@`` and ``.T @`` (sparse matrices, operators)
    together with a matching linear system, see :func:`solve_qp`.
    """

    P: object
    q: np.ndarray
    G: object
    h: np.ndarray
    c: float = 0.0
    l: Optional[np.ndarray] = None

    def __post_init__(self):
        if isinstance(self.P, (list, tuple)):
            self.P = np.array(self.P, dtype=float)
        if isinstance(self.G, (list, tuple)):
            self.G = np.array(self.G, dtype=float)
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        n, m = self.q.shape[0], self.h.shape[0]
        self.l = np.full(m, -np.inf) if self.l is None else np.asarray(self.l, dtype=float).reshape(-1)
        if isinstance(self.P, np.ndarray):
            self.P = np.asarray(self.P, dtype=float)
            if self.P.shape != (n, n):
                raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
            if not np.allclose(self.P, self.P.T, rtol=0.0, atol=1e-10):
                raise ValueError("P is not symmetric")
        if self.G is None:
            self.G = np.zeros((0, n))
        if isinstance(self.G, np.ndarray):
            self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        if self.G.shape != (m, n):
            raise ValueError(f"G has shape {self.G.shape}, expected {(m, n)}")
        if self.l.shape != (m,):
            raise ValueError("l and h must have the same length")
        if not (np.isfinite(self.q).all() and not np.isnan(self.h).any() and not np.isnan(self.l).any()):
            raise ValueError("problem data must not contain NaN")
        if (self.l > self.h).any():
            raise ValueError("lower bounds exceed upper bounds")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.h.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.c)

    def violation(self, x) -> float:
        """Largest bound violation of ``G x``."""
        if self.m == 0:
            return 0.0
        Gx = self.G @ np.asarray(x, dtype=float)
        return float(max(np.max(Gx - self.h), np.max(self.l - Gx), 0.0))


@dataclass
class QpSettings:
    """Solver tolerances and iteration caps.

    ``eps_abs``/``eps_rel`` drive the ADMM stopping test on primal and dual
    residuals; ``tol_feas`` bounds the constraint violation of a result
    reported as solved.
    """

    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    tol_feas: float = 1e-8
    eps_pinf: float = 1e-9
    max_iter: int = 50_000
    check_interval: int = 10
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    polish: bool = True
    polish_delta: float = 1e-9
    polish_refine: int = 8
    polish_passes: int = 10
    rho_min: float = 1e-6
    rho_max: float = 1e6
    scaling: int = 15


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    value: float
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool = False

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


class DenseLinearSystem:
    """Factorizations of ``P + sigma I + rho G' W G`` for dense data.

    ``W`` holds fixed per-row weights. Small systems are inverted
    explicitly so that a batch of columns with different step sizes is
    handled by one stacked product.
    """

    explicit_limit = 64

    def __init__(self, P, G, row_weights=None):
        self.P = np.asarray(P, dtype=float)
        G = np.asarray(G, dtype=float)
        w = np.ones(G.shape[0]) if row_weights is None else row_weights
        self.GtG = G.T @ (w[:, None] * G)
        self.n = self.P.shape[0]
        self._inv = None
        self._chol = None

    def factor(self, sigma: float, rho, columns=None):
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        base = self.P + sigma * np.eye(self.n)
        if self.n <= self.explicit_limit:
            inv = np.linalg.inv(base[None] + rho[:, None, None] * self.GtG[None])
            if columns is None or self._inv is None:
                self._inv = inv
            else:
                self._inv[columns] = inv
        else:
            chol = [scipy.linalg.cho_factor(base + r * self.GtG) for r in rho]
            if columns is None or self._chol is None:
                self._chol = chol
            else:
                for c, f in zip(np.atleast_1d(columns), chol):
                    self._chol[c] = f

    def solve(self, rhs: np.ndarray, columns: np.ndarray) -> np.ndarray:
        if self._inv is not None:
            return np.einsum("bij,jb->ib", self._inv[columns], rhs)
        out = np.empty_like(rhs)
        for k, c in enumerate(columns):
            out[:, k] = scipy.linalg.cho_solve(self._chol[c], rhs[:, k])
        return out


def regularize(P: np.ndarray, floor: float = 1e-12, shift: float = 1e-10) -> np.ndarray:
    """Add ``shift * I`` to a semidefinite ``P`` whose smallest eigenvalue is below ``floor``."""
    if P.shape[0] == 0:
        return P
    lam_min = np.linalg.eigvalsh(P)[0]
    if lam_min < -1e-8 * max(1.0, np.abs(P).max()):
        raise ValueError(f"P is not positive semidefinite (eigenvalue {lam_min:.3g})")
    if lam_min < floor:
        return P + shift * np.eye(P.shape[0])
    return P


def row_weights(l, h) -> np.ndarray:
    """Relative step size per row: larger on equality rows."""
    return np.where(l == h, EQUALITY_RHO_SCALE, 1.0)


def ruiz_scaling(P, G, iterations: int):
    """Diagonal scalings ``(d, e, c)`` equilibrating ``[[P, G'], [G, 0]]``.

    The scaled problem has ``c D P D``, ``c D q``, ``E G D`` with
    ``D = diag(d)`` and ``E = diag(e)``.
    """
    n, m = P.shape[0], G.shape[0]
    d, e, c = np.ones(n), np.ones(m), 1.0
    if iterations <= 0 or n == 0:
        return d, e, c
    Ps, Gs = P.copy(), G.copy()
    for _ in range(iterations):
        col = np.maximum(np.abs(Ps).max(axis=0, initial=0.0), np.abs(Gs).max(axis=0, initial=0.0))
        dk = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        dk[col == 0.0] = 1.0
        row = np.abs(Gs).max(axis=1, initial=0.0)
        ek = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
        ek[row == 0.0] = 1.0
        Ps = dk[:, None] * Ps * dk[None, :]
        Gs = ek[:, None] * Gs * dk[None, :]
        d *= dk
        e *= ek
    # cost scaling keeps the mean column norm of P near one
    mean = np.abs(Ps).max(axis=0, initial=0.0).mean()
    if mean > 0:
        c = 1.0 / np.clip(mean, 1e-4, 1e4)
    return d, e, c


def solve_qp(
    problem: QpProblem,
    settings: Optional[QpSettings] = None,
    x0=None,
    y0=None,
    linsys=None,
) -> QpSolution:
    """Solve a single convex QP.

    Parameters
    ----------
    problem : QpProblem
    settings : QpSettings, optional
    x0, y0 : array_like, optional
        Warm start for the primal iterate and the constraint multipliers.
    linsys : object, optional
        Provides ``factor(sigma, rho, columns)`` and ``solve(rhs, columns)``
        for ``P + sigma I + rho G' W G`` with ``W = row_weights(l, h)``.
        Defaults to a dense factorization. Polishing requires dense data.

    Returns
    -------
    QpSolution
    """
    settings = settings or QpSettings()
    P = problem.P
    dense = isinstance(P, np.ndarray) and isinstance(problem.G, np.ndarray)
    if dense and problem.n <= 1000:
        P = regularize(P)
    if linsys is None and not dense:
        raise ValueError("a linear system is required for non-dense data")
    X0 = None if x0 is None else np.asarray(x0, dtype=float).reshape(-1, 1)
    Y0 = None if y0 is None else np.asarray(y0, dtype=float).reshape(-1, 1)
    scale = ruiz_scaling(P, problem.G, settings.scaling) if linsys is None else None
    sol = _admm(P, problem.q[:, None], problem.G, problem.l, problem.h, settings,
                X0, Y0, linsys, polish=dense and settings.polish, scale=scale)[0]
    sol.value = problem.objective(sol.x)
    return sol


def solve_qp_batch(P, G, h, Q, settings: Optional[QpSettings] = None, X0=None, Y0=None, l=None) -> List[QpSolution]:
    """Solve the QPs ``(P, Q[:, j], G, l, h)`` for every column ``j`` of ``Q``."""
    settings = settings or QpSettings()
    problem = QpProblem(P, np.zeros(np.shape(P)[0]), G, h, l=l)
    P = regularize(problem.P)
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None]
    scale = ruiz_scaling(P, problem.G, settings.scaling)
    sols = _admm(P, Q, problem.G, problem.l, problem.h, settings, X0, Y0, None, polish=settings.polish, scale=scale)
    for j, sol in enumerate(sols):
        sol.value = float(0.5 * sol.x @ (problem.P @ sol.x) + Q[:, j] @ sol.x)
    return sols


def _inf_norm(a):
    if a.shape[0] == 0:
        return np.zeros(a.shape[1])
    return np.abs(a).max(axis=0)


def _admm(P, Q, G, l, h, s: QpSettings, X0, Y0, linsys, polish: bool, scale=None) -> List[QpSolution]:
    n, B = Q.shape
    m = h.shape[0]
    W = row_weights(l, h)[:, None]
    if scale is None:
        d, e, c = np.ones(n), np.ones(m), 1.0
        Ps, Gs = P, G
    else:
        d, e, c = scale
        Ps = c * d[:, None] * P * d[None, :]
        Gs = e[:, None] * G * d[None, :]
        linsys = DenseLinearSystem(Ps, Gs, W[:, 0])
    dc = (c * d)[:, None]
    Qs = dc * Q
    L, H = (e * l)[:, None], (e * h)[:, None]
    X = np.zeros((n, B)) if X0 is None else np.array(X0, dtype=float).reshape(n, B) / d[:, None]
    Y = np.zeros((m, B)) if Y0 is None else c * np.array(Y0, dtype=float).reshape(m, B) / e[:, None]
    Z = np.clip(Gs @ X, L, H) if m else np.zeros((0, B))
    rho = np.full(B, float(s.rho))
    linsys.factor(s.sigma, rho)

    done = np.zeros(B, dtype=bool)
    status = [MAX_ITER] * B
    iters = np.zeros(B, dtype=int)
    res_p = np.full(B, np.inf)
    res_d = np.full(B, np.inf)
    polished = np.zeros(B, dtype=bool)
    final = {}
    last_active = [None] * B
    k = 0

    while not done.all() and k < s.max_iter:
        cols = np.flatnonzero(~done)
        x, z, y = X[:, cols], Z[:, cols], Y[:, cols]
        R = rho[cols] * W
        q = Qs[:, cols]
        rhs = s.sigma * x - q
        if m:
            rhs = rhs + Gs.T @ (R * z - y)
        xt = linsys.solve(rhs, cols)
        zt = Gs @ xt if m else z
        x_new = s.alpha * xt + (1.0 - s.alpha) * x
        zr = s.alpha * zt + (1.0 - s.alpha) * z
        z_new = np.clip(zr + y / R, L, H)
        y_new = y + R * (zr - z_new)
        X[:, cols], Z[:, cols], Y[:, cols] = x_new, z_new, y_new
        k += 1
        iters[cols] = k

        if k % s.check_interval and k != s.max_iter:
            continue

        # residuals of the original problem
        Pxs = Ps @ x_new
        Gxs = Gs @ x_new if m else np.zeros((0, len(cols)))
        Gtys = Gs.T @ y_new if m else np.zeros_like(x_new)
        ew = e[:, None]
        Px, Gty, qu = Pxs / dc, Gtys / dc, Q[:, cols]
        Gx, zu = Gxs / ew, z_new / ew
        rp = _inf_norm(Gx - zu)
        rd = _inf_norm(Px + qu + Gty)
        res_p[cols], res_d[cols] = rp, rd
        scale_p = np.maximum(_inf_norm(Gx), _inf_norm(zu))
        scale_d = np.maximum.reduce([_inf_norm(Px), _inf_norm(Gty), _inf_norm(qu)])
        tol_p = s.eps_abs + s.eps_rel * scale_p
        tol_d = s.eps_abs + s.eps_rel * scale_d
        viol = _inf_norm(np.maximum(Gx - h[:, None], 0.0) + np.maximum(l[:, None] - Gx, 0.0)) if m else np.zeros(len(cols))
        converged = (rp <= tol_p) & (rd <= tol_d) & (viol <= s.tol_feas)

        for j, col in enumerate(cols):
            if converged[j]:
                done[col] = True
                status[col] = SOLVED
                continue
            if m and _certifies_infeasible(G, l, h, e * (y_new[:, j] - y[:, j]), s.eps_pinf):
                done[col] = True
                status[col] = INFEASIBLE
                continue
            if polish and m and rp[j] < 1e-3 * (1 + scale_p[j]) and rd[j] < 1e-3 * (1 + scale_d[j]):
                # a bound is active when its multiplier outweighs the slack
                yu = e * y_new[:, j] / c
                upper = (h - zu[:, j] < yu) & np.isfinite(h)
                lower = (zu[:, j] - l < -yu) & np.isfinite(l) & ~upper
                key = upper.tobytes() + lower.tobytes()
                if key != last_active[col]:
                    last_active[col] = key
                    out = _polish(P, Q[:, col], G, l, h, upper, lower, s)
                    if out is not None:
                        final[col] = out[:2]
                        res_p[col], res_d[col] = out[2:]
                        done[col] = True
                        status[col] = SOLVED
                        polished[col] = True

        if s.adaptive_rho and m:
            # balance the scaled residuals
            rps, rds = _inf_norm(Gxs - z_new), _inf_norm(Pxs + q + Gtys)
            sps = np.maximum(_inf_norm(Gxs), _inf_norm(z_new))
            sds = np.maximum.reduce([_inf_norm(Pxs), _inf_norm(Gtys), _inf_norm(q)])
            r = rho[cols]
            ratio = np.sqrt((rps / (sps + 1e-30)) / np.maximum(rds / (sds + 1e-30), 1e-30))
            new = np.clip(r * ratio, s.rho_min, s.rho_max)
            change = ((new > s.adaptive_rho_tolerance * r) | (new < r / s.adaptive_rho_tolerance)) & ~done[cols]
            if change.any():
                upd = cols[change]
                rho[upd] = new[change]
                linsys.factor(s.sigma, rho[upd], upd)

    out = []
    for col in range(B):
        if col in final:
            x, y = final[col]
        else:
            x, y = d * X[:, col], e * Y[:, col] / c
        out.append(QpSolution(
            x=x.copy(), y=y.copy(), value=np.nan, status=status[col],
            iterations=int(iters[col]), primal_residual=float(res_p[col]),
            dual_residual=float(res_d[col]), polished=bool(polished[col]),
        ))
    return out


def _certifies_infeasible(G, l, h, dy, eps) -> bool:
    nrm = np.abs(dy).max(initial=0.0)
    if nrm <= 1e-30:
        return False
    dy = dy / nrm
    up, lo = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
    # a multiplier on an infinite bound cannot certify anything
    if (up[np.isinf(h)] > eps).any() or (lo[np.isinf(l)] < -eps).any():
        return False
    hu = np.where(np.isinf(h), 0.0, h)
    ll = np.where(np.isinf(l), 0.0, l)
    return bool(np.abs(G.T @ dy).max(initial=0.0) <= eps and hu @ up + ll @ lo < -eps)


def _polish(P, q, G, l, h, upper, lower, s: QpSettings):
    """Solve equality QPs on a guessed active set, correcting the guess.

    Each pass adds rows the candidate violates and drops rows whose
    multipliers carry the wrong sign. Returns ``None`` unless a candidate
    passes the KKT checks.
    """
    upper, lower = upper.copy(), lower.copy()
    eq = l == h
    tried = set()
    for _ in range(s.polish_passes):
        key = upper.tobytes() + lower.tobytes()
        if key in tried:
            return None
        tried.add(key)
        cand = _equality_qp(P, q, G, l, h, upper, lower, s)
        if cand is None:
            return None
        x, y = cand
        Gx = G @ x
        Px = P @ x
        scale_d = max(np.abs(Px).max(initial=0), np.abs(G.T @ y).max(initial=0), np.abs(q).max(initial=0))
        tol_d = s.eps_abs + s.eps_rel * scale_d
        # multipliers must carry the sign of their bound (both allowed on equality rows)
        wrong_up = upper & ~eq & (y < -tol_d)
        wrong_lo = lower & ~eq & (y > tol_d)
        over = ~upper & (Gx > h + s.tol_feas)
        under = ~lower & (Gx < l - s.tol_feas)
        if not (wrong_up.any() or wrong_lo.any() or over.any() or under.any()):
            y[upper & ~eq] = np.maximum(y[upper & ~eq], 0.0)
            y[lower & ~eq] = np.minimum(y[lower & ~eq], 0.0)
            viol = float(max(np.max(Gx - h, initial=0.0), np.max(l - Gx, initial=0.0), 0.0))
            rd = float(np.abs(Px + q + G.T @ y).max(initial=0.0))
            if viol > s.tol_feas or rd > tol_d:
                return None
            return x, y, viol, rd
        upper = (upper & ~wrong_up) | over
        lower = (lower & ~wrong_lo) | under
        lower &= ~upper
    return None


def _equality_qp(P, q, G, l, h, upper, lower, s: QpSettings):
    n = q.shape[0]
    active = upper | lower
    GA = G[active]
    bA = np.where(upper, h, l)[active]
    na = GA.shape[0]
    K0 = np.zeros((n + na, n + na))
    K0[:n, :n] = P
    K0[:n, n:] = GA.T
    K0[n:, :n] = GA
    K = K0.copy()
    K[:n, :n] += s.polish_delta * np.eye(n)
    K[n:, n:] -= s.polish_delta * np.eye(na)
    rhs = np.concatenate([-q, bA])
    try:
        lu = scipy.linalg.lu_factor(K, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    sol = scipy.linalg.lu_solve(lu, rhs)
    for _ in range(s.polish_refine):
        resid = rhs - K0 @ sol
        if np.abs(resid).max(initial=0.0) <= 1e-14 * (1 + np.abs(rhs).max(initial=0.0)):
            break
        sol = sol + scipy.linalg.lu_solve(lu, resid)
    if not np.isfinite(sol).all():
        return None
    y = np.zeros(h.shape[0])
    y[active] = sol[n:]
    return sol[:n], y
