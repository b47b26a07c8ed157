"""
Residential battery model and stacked constraint representation.

Each household ``i`` carries a battery with state of charge ``x_i`` [kWh]
and is actuated by a charging rate ``u_plus >= 0`` and a discharging rate
``u_minus <= 0`` [kW]. Over a horizon of ``N`` steps the controls of one
household are stacked as ``(u_plus(0), u_minus(0), u_plus(1), ...)`` and
the controls of a microgrid as the concatenation over households.

Every state and control constraint is expressed as ``D u <= d`` and the
aggregated demand of a microgrid as ``z_bar = A u + b``.
"""

import functools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sparse

# rows per household per step in D
ROWS_PER_STEP = 8

# tolerance used when accepting a measured SoC slightly outside [0, C]
SOC_ADMISSIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class BatteryParams:
    """Static parameters of one residential battery.

    Attributes
    ----------
    alpha, beta, gamma : float
        Self-discharge, charging and discharging efficiencies in (0, 1].
    capacity : float
        Usable capacity C [kWh], ``C >= 0``. ``C = 0`` is a household
        without storage.
    u_min : float
        Maximal discharging rate [kW], ``u_min <= 0``.
    u_max : float
        Maximal charging rate [kW], ``u_max >= 0``.
    """

    alpha: float
    beta: float
    gamma: float
    capacity: float
    u_min: float
    u_max: float

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not (0.0 < value <= 1.0):
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if not self.capacity >= 0.0:
            raise ValueError(f"capacity must be >= 0, got {self.capacity}")
        if not self.u_min <= 0.0:
            raise ValueError(f"u_min must be <= 0, got {self.u_min}")
        if not self.u_max >= 0.0:
            raise ValueError(f"u_max must be >= 0, got {self.u_max}")

    @property
    def effective_bounds(self) -> Tuple[float, float]:
        """Rate bounds actually enforced; a battery of zero capacity cannot move."""
        if self.capacity == 0.0:
            return 0.0, 0.0
        return self.u_min, self.u_max

    @classmethod
    def no_battery(cls) -> "BatteryParams":
        return cls(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)


@dataclass
class ResidentialSystem:
    """A household: battery, current SoC and net consumption profile."""

    params: BatteryParams
    soc: float
    net_consumption: np.ndarray

    def __post_init__(self):
        self.net_consumption = np.asarray(self.net_consumption, dtype=float)
        if not (0.0 <= self.soc <= self.params.capacity):
            raise ValueError(
                f"SoC {self.soc} outside [0, {self.params.capacity}]"
            )


@dataclass(frozen=True)
class ControlStep:
    """Charging and discharging rates applied during one step."""

    u_plus: float
    u_minus: float

    def is_admissible(self, params: BatteryParams, tol: float = 0.0) -> bool:
        lo, hi = params.effective_bounds
        if not (-tol <= self.u_plus <= hi + tol and lo - tol <= self.u_minus <= tol):
            return False
        share = _share(self.u_plus, self.u_minus, lo, hi)
        return -tol <= share <= 1.0 + tol


def _share(u_plus, u_minus, lo, hi):
    # fraction terms of the joint charge/discharge bound, 0/0 read as 0
    total = 0.0
    if lo < 0.0:
        total = total + u_minus / lo
    if hi > 0.0:
        total = total + u_plus / hi
    return total


def step_soc(x: float, u: ControlStep, params: BatteryParams, dt: float) -> float:
    """Advance the state of charge by one step: ``alpha x + dt (beta u+ + u-)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return params.alpha * x + dt * (params.beta * u.u_plus + u.u_minus)


def demand_step(w: float, u: ControlStep, gamma: float) -> float:
    """Power demand of a household during one step: ``w + u+ + gamma u-``."""
    return w + u.u_plus + gamma * u.u_minus


def _soc_map(params: BatteryParams, horizon: int, dt: float) -> np.ndarray:
    """Matrix S with ``x(n+1) = alpha^(n+1) x0 + (S u)[n]`` for n = 0..N-1."""
    n = np.arange(horizon)
    lag = n[:, None] - n[None, :]
    decay = np.where(lag >= 0, params.alpha ** np.maximum(lag, 0), 0.0)
    S = np.zeros((horizon, 2 * horizon))
    S[:, 0::2] = dt * params.beta * decay
    S[:, 1::2] = dt * decay
    return S


def constraint_block(params: BatteryParams, horizon: int, dt: float) -> np.ndarray:
    """Constraint matrix ``D_i`` of one household (``8 N x 2 N``).

    Rows are ordered step-major with eight kinds per step: SoC upper,
    SoC lower, discharge bound, discharge sign, charge sign, charge bound,
    joint bound upper, joint bound lower.
    """
    lo, hi = params.effective_bounds
    S = _soc_map(params, horizon, dt)
    c_minus = 1.0 / lo if lo < 0.0 else 0.0
    c_plus = 1.0 / hi if hi > 0.0 else 0.0

    D = np.zeros((horizon, ROWS_PER_STEP, 2 * horizon))
    steps = np.arange(horizon)
    D[:, 0, :] = S
    D[:, 1, :] = -S
    D[steps, 2, 2 * steps + 1] = -1.0
    D[steps, 3, 2 * steps + 1] = 1.0
    D[steps, 4, 2 * steps] = -1.0
    D[steps, 5, 2 * steps] = 1.0
    D[steps, 6, 2 * steps + 1] = c_minus
    D[steps, 6, 2 * steps] = c_plus
    D[steps, 7, 2 * steps + 1] = -c_minus
    D[steps, 7, 2 * steps] = -c_plus
    return D.reshape(horizon * ROWS_PER_STEP, 2 * horizon)


def constraint_rhs(params: BatteryParams, soc: float, horizon: int) -> np.ndarray:
    """Right-hand side ``d_i`` matching :func:`constraint_block`."""
    lo, hi = params.effective_bounds
    free = params.alpha ** np.arange(1, horizon + 1) * soc
    d = np.zeros((horizon, ROWS_PER_STEP))
    d[:, 0] = params.capacity - free
    d[:, 1] = free
    d[:, 2] = -lo
    d[:, 5] = hi
    d[:, 6] = 1.0
    return d.reshape(-1)


@dataclass
class MicrogridModel:
    """Stacked linear model of one microgrid over a prediction horizon.

    ``u`` has length ``2 N I``; per-household blocks are kept so that large
    microgrids never need dense global matrices.
    """

    params: List[BatteryParams]
    soc: np.ndarray
    w: np.ndarray
    horizon: int
    dt: float
    D_blocks: np.ndarray = field(repr=False)
    d_blocks: np.ndarray = field(repr=False)
    soc_maps: np.ndarray = field(repr=False)

    @property
    def n_systems(self) -> int:
        return len(self.params)

    @property
    def n_controls(self) -> int:
        return 2 * self.horizon * self.n_systems

    @property
    def gamma(self) -> np.ndarray:
        return np.array([p.gamma for p in self.params])

    @property
    def b(self) -> np.ndarray:
        """Baseline aggregated demand (sum of net consumption)."""
        return self.w.sum(axis=0)

    @property
    def A(self) -> np.ndarray:
        N = self.horizon
        A = np.zeros((N, self.n_systems, 2 * N))
        steps = np.arange(N)
        A[steps, :, 2 * steps] = 1.0
        A[steps, :, 2 * steps + 1] = self.gamma
        return A.reshape(N, self.n_controls)

    @property
    def D(self) -> np.ndarray:
        return scipy.linalg.block_diag(*self.D_blocks)

    @property
    def d(self) -> np.ndarray:
        return self.d_blocks.reshape(-1)

    def D_sparse(self) -> sparse.csr_matrix:
        return sparse.block_diag(list(self.D_blocks), format="csr")

    def split(self, u) -> np.ndarray:
        """Reshape stacked controls to ``(I, N, 2)``."""
        return np.asarray(u, dtype=float).reshape(self.n_systems, self.horizon, 2)

    def household_demand(self, u) -> np.ndarray:
        """Per-household demand profiles ``z_i``, shape ``(I, N)``."""
        uu = self.split(u)
        return self.w + uu[:, :, 0] + self.gamma[:, None] * uu[:, :, 1]

    def aggregate(self, u) -> np.ndarray:
        """Aggregated demand ``A u + b``."""
        return self.household_demand(u).sum(axis=0)

    def soc_trajectory(self, u) -> np.ndarray:
        """SoC after each step, ``(I, N)``, by forward simulation."""
        uu = self.split(u)
        out = np.empty((self.n_systems, self.horizon))
        x = self.soc.copy()
        alpha = np.array([p.alpha for p in self.params])
        beta = np.array([p.beta for p in self.params])
        for n in range(self.horizon):
            x = alpha * x + self.dt * (beta * uu[:, n, 0] + uu[:, n, 1])
            out[:, n] = x
        return out

    def constraint_violation(self, u) -> float:
        """Largest violation of ``D u <= d`` (0 when feasible)."""
        uu = np.asarray(u, dtype=float).reshape(self.n_systems, -1)
        slack = np.einsum("irc,ic->ir", self.D_blocks, uu) - self.d_blocks
        return float(max(slack.max(initial=0.0), 0.0))

    def clip_to_limits(self, u) -> np.ndarray:
        """Move ``u`` onto the feasible set by the smallest per-step corrections.

        Rates are clipped to their bounds, the joint charge/discharge bound
        is enforced by scaling, and SoC bound violations are removed by
        trimming the offending rate while simulating forward. Intended for
        iterates that are already feasible up to solver tolerance.
        """
        uu = self.split(u).copy()
        lo = np.array([p.effective_bounds[0] for p in self.params])
        hi = np.array([p.effective_bounds[1] for p in self.params])
        alpha = np.array([p.alpha for p in self.params])
        beta = np.array([p.beta for p in self.params])
        cap = np.array([p.capacity for p in self.params])
        c_minus = np.divide(1.0, lo, out=np.zeros_like(lo), where=lo < 0)
        c_plus = np.divide(1.0, hi, out=np.zeros_like(hi), where=hi > 0)
        T = self.dt

        up = np.clip(uu[:, :, 0], 0.0, hi[:, None])
        um = np.clip(uu[:, :, 1], lo[:, None], 0.0)
        share = c_minus[:, None] * um + c_plus[:, None] * up
        scale = np.where(share > 1.0, 1.0 / np.maximum(share, 1.0), 1.0)
        up *= scale
        um *= scale

        x = self.soc.copy()
        for n in range(self.horizon):
            nxt = alpha * x + T * (beta * up[:, n] + um[:, n])
            low = nxt < 0.0
            if low.any():
                um[low, n] = np.minimum(-(alpha[low] * x[low] + T * beta[low] * up[low, n]) / T, 0.0)
            high = nxt > cap
            if high.any():
                up[high, n] = np.maximum(
                    (cap[high] - alpha[high] * x[high] - T * um[high, n]) / (T * beta[high]), 0.0
                )
            x = np.clip(alpha * x + T * (beta * up[:, n] + um[:, n]), 0.0, cap)
        uu[:, :, 0] = up
        uu[:, :, 1] = um
        return uu.reshape(-1)


@functools.lru_cache(maxsize=1024)
def _blocks(params: BatteryParams, horizon: int, dt: float):
    # D_i depends on the parameters only, so MPC steps reuse it
    D = constraint_block(params, horizon, dt)
    S = _soc_map(params, horizon, dt)
    D.setflags(write=False)
    S.setflags(write=False)
    return D, S


def build_microgrid_model(
    params: Sequence[BatteryParams],
    horizon: int,
    dt: float,
    soc: Sequence[float],
    w,
) -> MicrogridModel:
    """Assemble ``A, b, D, d`` for one microgrid.

    Parameters
    ----------
    params : sequence of BatteryParams
        One entry per household.
    horizon : int
        Prediction horizon ``N >= 2``.
    dt : float
        Step length [h].
    soc : sequence of float
        Measured SoC per household [kWh]; values within ``1e-9`` outside
        ``[0, C]`` are clipped, anything further is rejected.
    w : array_like, shape (I, >= N)
        Predicted net consumption per household; the first ``N`` entries
        are used.
    """
    params = list(params)
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    if dt <= 0:
        raise ValueError("dt must be positive")
    I = len(params)
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != I:
        raise ValueError(f"expected {I} net consumption profiles")
    if w.shape[1] < horizon:
        raise ValueError(
            f"net consumption profiles have {w.shape[1]} steps, need {horizon}"
        )
    soc = np.asarray(soc, dtype=float).reshape(-1)
    if soc.shape[0] != I:
        raise ValueError(f"expected {I} SoC values")
    cap = np.array([p.capacity for p in params])
    bad = (soc < -SOC_ADMISSIBILITY_TOL) | (soc > cap + SOC_ADMISSIBILITY_TOL) | ~np.isfinite(soc)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"SoC {soc[i]} of household {i} outside [0, {cap[i]}]")
    soc = np.clip(soc, 0.0, cap)

    D_blocks = np.empty((I, ROWS_PER_STEP * horizon, 2 * horizon))
    d_blocks = np.empty((I, ROWS_PER_STEP * horizon))
    soc_maps = np.empty((I, horizon, 2 * horizon))
    for i, p in enumerate(params):
        D_blocks[i], soc_maps[i] = _blocks(p, horizon, float(dt))
        d_blocks[i] = constraint_rhs(p, soc[i], horizon)
    return MicrogridModel(
        params=params,
        soc=soc,
        w=w[:, :horizon].copy(),
        horizon=horizon,
        dt=dt,
        D_blocks=D_blocks,
        d_blocks=d_blocks,
        soc_maps=soc_maps,
    )


def microgrid_from_systems(
    systems: Sequence[ResidentialSystem], horizon: int, dt: float, start: int = 0
) -> MicrogridModel:
    """Build a model from households' own SoC and net consumption."""
    w = np.array([s.net_consumption[start:start + horizon] for s in systems])
    return build_microgrid_model(
        [s.params for s in systems], horizon, dt, [s.soc for s in systems], w
    )


@dataclass(frozen=True)
class NetworkTopology:
    """Line limits and efficiencies between microgrids.

    ``edges`` lists the lines ``(k, v)`` with ``k < v`` (0-based) in
    lexicographic order.
    """

    line_limits: np.ndarray
    efficiencies: np.ndarray
    edges: Tuple[Tuple[int, int], ...]

    @classmethod
    def from_matrices(cls, line_limits, efficiencies) -> "NetworkTopology":
        lam = np.array(line_limits, dtype=float)
        eta = np.array(efficiencies, dtype=float)
        edges = validate_topology(lam, eta)
        lam.setflags(write=False)
        eta.setflags(write=False)
        return cls(lam, eta, tuple(edges))

    @classmethod
    def isolated(cls, n_microgrids: int) -> "NetworkTopology":
        z = np.zeros((n_microgrids, n_microgrids))
        return cls.from_matrices(z, z)

    @property
    def n_microgrids(self) -> int:
        return self.line_limits.shape[0]

    def neighbours(self, k: int) -> List[int]:
        return [int(v) for v in np.flatnonzero(self.line_limits[k] > 0)]


def validate_topology(line_limits, efficiencies) -> List[Tuple[int, int]]:
    """Check line data and return the edge list ``{(k, v): lambda_kv > 0, k < v}``."""
    lam = np.asarray(line_limits, dtype=float)
    eta = np.asarray(efficiencies, dtype=float)
    if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
        raise ValueError("line limit matrix must be square")
    if eta.shape != lam.shape:
        raise ValueError("efficiency matrix must match the line limit matrix")
    if not (np.isfinite(lam).all() and np.isfinite(eta).all()):
        raise ValueError("topology matrices must be finite")
    if (lam < 0).any():
        raise ValueError("line limits must be non-negative")
    if not np.array_equal(lam, lam.T):
        i, j = np.argwhere(lam != lam.T)[0]
        raise ValueError(f"line limits not symmetric at ({i}, {j})")
    if not np.array_equal(eta, eta.T):
        i, j = np.argwhere(eta != eta.T)[0]
        raise ValueError(f"efficiencies not symmetric at ({i}, {j})")
    if np.any(np.diag(lam) != 0):
        raise ValueError("line limit matrix must have a zero diagonal")
    live = lam > 0
    if np.any(live & ((eta <= 0) | (eta > 1))):
        i, j = np.argwhere(live & ((eta <= 0) | (eta > 1)))[0]
        raise ValueError(f"efficiency {eta[i, j]} on line ({i}, {j}) outside (0, 1]")
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(live, 1)))]
