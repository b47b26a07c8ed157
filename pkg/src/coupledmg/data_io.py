"""
Time series, battery fleets, references and scenario files.

Scenario documents are JSON with an explicit ``schema_version``. Household
series live in CSV files next to the document (one per microgrid and
kind, referenced by relative path): a header row of household names, then
one row per step in kW.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import BatteryParams, NetworkTopology, validate_topology

SCHEMA_VERSION = "1"
DEFAULT_DT = 0.25

# the four-microgrid network used in the case study
CASE_ETA = np.array([
    [0.0, 0.8, 0.9, 0.85],
    [0.8, 0.0, 0.0, 0.9],
    [0.9, 0.0, 0.0, 0.0],
    [0.85, 0.9, 0.0, 0.0],
])
CASE_LAMBDA = np.array([
    [0.0, 9.0, 8.0, 7.0],
    [9.0, 0.0, 0.0, 8.0],
    [8.0, 0.0, 0.0, 0.0],
    [7.0, 8.0, 0.0, 0.0],
])
CASE_COUNTS = (40, 20, 20, 20)

MOVING_AVERAGE = "moving_average"
CONSTANT = "constant"


@dataclass
class Profiles:
    """Columns of a profile CSV: ``values`` has shape ``(columns, steps)``."""

    names: List[str]
    values: np.ndarray
    dt: float = DEFAULT_DT


def load_profiles_csv(path, expected_columns: Optional[int] = None, dt: float = DEFAULT_DT) -> Profiles:
    """Read a profile table.

    Parameters
    ----------
    path : str or Path
    expected_columns : int, optional
        Reject tables with a different number of columns.
    dt : float
        Sampling interval in hours.

    Raises
    ------
    FileNotFoundError
    ValueError
        On empty files, ragged rows or non-numeric cells. Locations are
        reported as ``(row, column)``, both 1-based and counting data rows
        below the header.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"profile file not found: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ValueError(f"{path}: empty file")
    names = [c.strip() for c in rows[0]]
    if expected_columns is not None and len(names) != expected_columns:
        raise ValueError(f"{path}: expected {expected_columns} columns, found {len(names)}")
    data = rows[1:]
    if not data:
        raise ValueError(f"{path}: no data rows")
    values = np.empty((len(data), len(names)))
    for i, row in enumerate(data, start=1):
        if len(row) != len(names):
            raise ValueError(f"{path}: row {i} has {len(row)} cells, expected {len(names)}")
        for j, cell in enumerate(row, start=1):
            try:
                values[i - 1, j - 1] = float(cell)
            except ValueError:
                raise ValueError(f"{path}: non-numeric cell {cell!r} at ({i},{j})") from None
    if not np.isfinite(values).all():
        i, j = np.argwhere(~np.isfinite(values))[0]
        raise ValueError(f"{path}: non-finite cell at ({i + 1},{j + 1})")
    return Profiles(names, values.T.copy(), dt)


def save_profiles_csv(path, names: Sequence[str], values) -> None:
    """Write ``values`` (shape ``(columns, steps)``) with full float precision."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] != len(names):
        raise ValueError("values must have one row per name")
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(names)
        for row in values.T:
            wr.writerow([repr(float(v)) for v in row])


def synthesize_batteries(count: int, seed=None) -> Tuple[List[BatteryParams], np.ndarray]:
    """Random battery fleet with truncated normal parameters.

    Capacity ``C ~ N(2, 0.5)`` kWh, SoC ``x ~ N(0.5, 0.05)`` kWh,
    ``alpha ~ N(0.99, 0.01)``, ``beta, gamma ~ N(0.95, 0.05)`` and rate
    factors ``~ N(0.25, 0.15)`` times ``C`` kW. Draws are clamped into the
    valid ranges rather than redrawn.

    Parameters
    ----------
    count : int
    seed : int or numpy.random.Generator, optional

    Returns
    -------
    params : list of BatteryParams
    soc : ndarray, shape (count,)
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    cap = np.maximum(rng.normal(2.0, 0.5, count), 0.0)
    soc = np.clip(rng.normal(0.5, 0.05, count), 0.0, cap)
    alpha = np.clip(rng.normal(0.99, 0.01, count), 1e-3, 1.0)
    beta = np.clip(rng.normal(0.95, 0.05, count), 1e-3, 1.0)
    gamma = np.clip(rng.normal(0.95, 0.05, count), 1e-3, 1.0)
    discharge = np.maximum(rng.normal(0.25, 0.15, count), 0.0) * cap
    charge = np.maximum(rng.normal(0.25, 0.15, count), 0.0) * cap
    params = [
        BatteryParams(float(a), float(b), float(g), float(c), -float(lo), float(hi))
        for a, b, g, c, lo, hi in zip(alpha, beta, gamma, cap, discharge, charge)
    ]
    return params, soc


def _total(w_pred: Sequence[np.ndarray]) -> np.ndarray:
    if not w_pred:
        raise ValueError("no series given")
    series = [np.asarray(w, dtype=float) for w in w_pred]
    if any(w.ndim != 2 for w in series):
        raise ValueError("each microgrid needs an (households, steps) array")
    length = min(w.shape[1] for w in series)
    if length == 0:
        raise ValueError("empty series")
    return sum(w[:, :length].sum(axis=0) for w in series)


def reference_trajectory(w_pred: Sequence[np.ndarray], n: int, horizon: int, counts=None) -> np.ndarray:
    """Reference ``zeta_k(n)`` for every microgrid.

    ``zeta(n)`` is the mean total predicted net consumption over steps
    ``n - N + 1 .. n`` (over ``0 .. n`` while ``n < N``); microgrid ``k``
    gets the share ``I_k / sum I``.

    Parameters
    ----------
    w_pred : sequence of ndarray
        Predicted net consumption, ``(I_k, steps)`` per microgrid.
    n : int
    horizon : int
        Window length ``N``.
    counts : sequence of int, optional
        Household counts; default from ``w_pred``.
    """
    total = _total(w_pred)
    if not 0 <= n < total.shape[0]:
        raise ValueError(f"step {n} outside the series (length {total.shape[0]})")
    lo = max(0, n - horizon + 1)
    zeta = total[lo:n + 1].mean()
    return _shares(w_pred, counts) * zeta


def _shares(w_pred, counts) -> np.ndarray:
    counts = np.array([np.shape(w)[0] for w in w_pred] if counts is None else counts, dtype=float)
    if counts.sum() <= 0:
        raise ValueError("no households")
    return counts / counts.sum()


def reference_profiles(w_pred: Sequence[np.ndarray], start: int, horizon: int, counts=None) -> np.ndarray:
    """``zeta_k(n)`` for ``n = start .. start + N - 1`` as an ``(M, N)`` array."""
    total = _total(w_pred)
    if start < 0 or start + horizon > total.shape[0]:
        raise ValueError(f"steps {start}..{start + horizon - 1} outside the series (length {total.shape[0]})")
    c = np.concatenate([[0.0], np.cumsum(total)])
    n = np.arange(start, start + horizon)
    lo = np.maximum(0, n - horizon + 1)
    zeta = (c[n + 1] - c[lo]) / (n + 1 - lo)
    return _shares(w_pred, counts)[:, None] * zeta[None, :]


@dataclass
class Scenario:
    """Everything needed to run the open or closed loop.

    Attributes
    ----------
    batteries : list of list of BatteryParams
        Per microgrid, per household.
    soc : list of ndarray
        Initial SoC per microgrid.
    w_actual, w_pred : list of ndarray
        Net consumption, ``(I_k, steps)`` per microgrid.
    line_limits, efficiencies : ndarray
    dt : float
    horizon : int
    start : int
        First simulated step. Steps before it only feed the reference.
    reference : dict
        ``{"kind": "moving_average"}`` or ``{"kind": "constant", "values": [...]}``
        with one value per microgrid.
    seed : int or None
    """

    batteries: List[List[BatteryParams]]
    soc: List[np.ndarray]
    w_actual: List[np.ndarray]
    w_pred: List[np.ndarray]
    line_limits: np.ndarray
    efficiencies: np.ndarray
    dt: float = DEFAULT_DT
    horizon: int = 96
    start: int = 0
    reference: Dict = field(default_factory=lambda: {"kind": MOVING_AVERAGE})
    seed: Optional[int] = None
    name: str = "scenario"

    def __post_init__(self):
        self.soc = [np.asarray(s, dtype=float).reshape(-1) for s in self.soc]
        self.w_actual = [np.asarray(w, dtype=float) for w in self.w_actual]
        self.w_pred = [np.asarray(w, dtype=float) for w in self.w_pred]
        self.line_limits = np.asarray(self.line_limits, dtype=float)
        self.efficiencies = np.asarray(self.efficiencies, dtype=float)
        self.validate()

    @property
    def counts(self) -> List[int]:
        return [len(b) for b in self.batteries]

    @property
    def n_microgrids(self) -> int:
        return len(self.batteries)

    @property
    def length(self) -> int:
        return min(w.shape[1] for w in self.w_actual + self.w_pred)

    @property
    def topology(self) -> NetworkTopology:
        return NetworkTopology.from_matrices(self.line_limits, self.efficiencies)

    def max_steps(self) -> int:
        """Closed-loop steps the series can support."""
        return self.length - self.horizon - self.start + 1

    def validate(self) -> None:
        M = len(self.batteries)
        if M == 0:
            raise ValueError("scenario has no microgrids")
        for name, items in (("soc", self.soc), ("w_actual", self.w_actual), ("w_pred", self.w_pred)):
            if len(items) != M:
                raise ValueError(f"{name} has {len(items)} entries for {M} microgrids")
        for k in range(M):
            I = len(self.batteries[k])
            if I == 0:
                raise ValueError(f"microgrid {k} has no households")
            if self.soc[k].shape != (I,):
                raise ValueError(f"microgrid {k}: expected {I} SoC values")
            for name, w in (("actual", self.w_actual[k]), ("predicted", self.w_pred[k])):
                if w.ndim != 2 or w.shape[0] != I:
                    raise ValueError(f"microgrid {k}: {name} series must have {I} rows")
            cap = np.array([p.capacity for p in self.batteries[k]])
            if ((self.soc[k] < 0) | (self.soc[k] > cap)).any():
                raise ValueError(f"microgrid {k}: SoC outside [0, C]")
        if self.line_limits.shape != (M, M):
            raise ValueError(f"line limits must be {M}x{M}")
        validate_topology(self.line_limits, self.efficiencies)
        if self.dt <= 0 or self.horizon < 2 or self.start < 0:
            raise ValueError("need dt > 0, horizon >= 2 and start >= 0")
        if self.max_steps() < 1:
            raise ValueError(f"series of length {self.length} cannot cover start {self.start} plus horizon {self.horizon}")
        kind = self.reference.get("kind")
        if kind == CONSTANT:
            if len(self.reference.get("values", ())) != M:
                raise ValueError("constant reference needs one value per microgrid")
        elif kind != MOVING_AVERAGE:
            raise ValueError(f"unknown reference kind {kind!r}")

    def references(self, k: int) -> np.ndarray:
        """Reference profiles ``(M, N)`` for the window starting at step ``k``."""
        if self.reference["kind"] == CONSTANT:
            v = np.asarray(self.reference["values"], dtype=float)
            return np.repeat(v[:, None], self.horizon, axis=1)
        return reference_profiles(self.w_pred, k, self.horizon, self.counts)


def _battery_dict(p: BatteryParams) -> dict:
    return {"alpha": p.alpha, "beta": p.beta, "gamma": p.gamma,
            "capacity": p.capacity, "u_min": p.u_min, "u_max": p.u_max}


def save_scenario(scenario: Scenario, path) -> None:
    """Write the scenario document to ``path`` and its series next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    mgs = []
    for k in range(scenario.n_microgrids):
        names = [f"h{i}" for i in range(scenario.counts[k])]
        files = {}
        for kind, series in (("actual", scenario.w_actual[k]), ("predicted", scenario.w_pred[k])):
            fname = f"{stem}_mg{k}_{kind}.csv"
            save_profiles_csv(path.parent / fname, names, series)
            files[kind] = fname
        mgs.append({
            "households": scenario.counts[k],
            "batteries": [_battery_dict(p) for p in scenario.batteries[k]],
            "soc": [float(x) for x in scenario.soc[k]],
            "series": files,
        })
    doc = {
        "schema_version": SCHEMA_VERSION,
        "name": scenario.name,
        "dt": scenario.dt,
        "horizon": scenario.horizon,
        "start": scenario.start,
        "seed": scenario.seed,
        "reference": scenario.reference,
        "line_limits": scenario.line_limits.tolist(),
        "efficiencies": scenario.efficiencies.tolist(),
        "microgrids": mgs,
    }
    with path.open("w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


_REQUIRED = ("dt", "horizon", "start", "reference", "line_limits", "efficiencies", "microgrids")


def load_scenario(path) -> Scenario:
    """Read a scenario written by :func:`save_scenario`.

    Raises
    ------
    ValueError
        On a schema version mismatch, missing fields or invalid data
        (including an invalid topology).
    """
    path = Path(path)
    with path.open() as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {version!r} (expected {SCHEMA_VERSION!r})")
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise ValueError(f"{path}: missing fields {', '.join(missing)}")
    batteries, soc, actual, pred = [], [], [], []
    for k, mg in enumerate(doc["microgrids"]):
        for key in ("batteries", "soc", "series"):
            if key not in mg:
                raise ValueError(f"{path}: microgrid {k} lacks {key!r}")
        batteries.append([BatteryParams(**b) for b in mg["batteries"]])
        soc.append(np.array(mg["soc"], dtype=float))
        n = len(mg["batteries"])
        actual.append(load_profiles_csv(path.parent / mg["series"]["actual"], n, doc["dt"]).values)
        pred.append(load_profiles_csv(path.parent / mg["series"]["predicted"], n, doc["dt"]).values)
    return Scenario(
        batteries=batteries, soc=soc, w_actual=actual, w_pred=pred,
        line_limits=np.array(doc["line_limits"], dtype=float),
        efficiencies=np.array(doc["efficiencies"], dtype=float),
        dt=float(doc["dt"]), horizon=int(doc["horizon"]), start=int(doc["start"]),
        reference=doc["reference"], seed=doc.get("seed"), name=doc.get("name", path.stem),
    )


def _daily_load(hours: np.ndarray) -> np.ndarray:
    # night base, morning bump, evening peak [kW]
    return (0.25
            + 0.35 * np.exp(-0.5 * ((hours - 7.5) / 1.2) ** 2)
            + 0.75 * np.exp(-0.5 * ((hours - 19.0) / 1.8) ** 2))


def _pv(hours: np.ndarray, peak: float) -> np.ndarray:
    return peak * np.clip(np.sin((hours - 6.0) / 14.0 * np.pi), 0.0, None) ** 1.5


def demo_scenario(
    seed: int = 0,
    counts: Sequence[int] = CASE_COUNTS,
    horizon: int = 96,
    dt: float = DEFAULT_DT,
    days: int = 3,
    perfect_prediction: bool = False,
) -> Scenario:
    """Synthetic case study on the four-microgrid network.

    Households share a daily load shape with random scale, timing jitter
    and noise. One PV profile is subtracted from every household; the
    prediction differs from it by a smooth daily error. The first day is
    history for the reference, so simulation starts at step ``N``.
    """
    counts = [int(c) for c in counts]
    if not counts or min(counts) < 1:
        raise ValueError("every microgrid needs at least one household")
    M = len(counts)
    if M == len(CASE_COUNTS):
        lam, eta = CASE_LAMBDA.copy(), CASE_ETA.copy()
    else:
        # a ring of lines for other sizes
        lam, eta = np.zeros((M, M)), np.zeros((M, M))
        for k in range(M if M > 2 else M - 1):
            v = (k + 1) % M
            lam[k, v] = lam[v, k] = 8.0
            eta[k, v] = eta[v, k] = 0.9
    rng = np.random.default_rng(seed)
    steps = days * int(round(24 / dt))
    hours = np.arange(steps) * dt % 24.0
    day = np.arange(steps) * dt // 24.0

    weather = rng.uniform(0.5, 1.0, days)
    pv_actual = _pv(hours, 0.3) * weather[day.astype(int)]
    pv_error = 1.0 + 0.15 * np.sin(2 * np.pi * (np.arange(steps) * dt) / 24.0 + rng.uniform(0, 2 * np.pi))
    pv_pred = _pv(hours, 0.3) * np.clip(weather[day.astype(int)] * pv_error, 0.0, None)

    batteries, soc, actual, pred = [], [], [], []
    for k, n in enumerate(counts):
        params, x0 = synthesize_batteries(n, rng)
        scale = rng.uniform(0.6, 1.4, (n, 1))
        shift = rng.normal(0.0, 0.75, (n, 1))
        load = scale * _daily_load((hours[None, :] - shift) % 24.0)
        load = np.maximum(load + 0.05 * rng.standard_normal((n, steps)), 0.0)
        batteries.append(params)
        soc.append(x0)
        actual.append(load - pv_actual[None, :])
        pred.append(actual[-1].copy() if perfect_prediction else load - pv_pred[None, :])
    return Scenario(
        batteries=batteries, soc=soc, w_actual=actual, w_pred=pred,
        line_limits=lam, efficiencies=eta, dt=dt, horizon=horizon,
        start=horizon if days * int(round(24 / dt)) >= 2 * horizon + 1 else 0,
        reference={"kind": MOVING_AVERAGE}, seed=seed, name="demo",
    )


def example1_scenario(horizon: int = 2) -> Scenario:
    """Four battery-less microgrids on a chain with demands (-10, 0, 0, 10) and zero reference."""
    lam = np.zeros((4, 4))
    for k in range(3):
        lam[k, k + 1] = lam[k + 1, k] = 10.0
    eta = (lam > 0).astype(float)
    demand = [-10.0, 0.0, 0.0, 10.0]
    w = [np.full((1, horizon), d) for d in demand]
    return Scenario(
        batteries=[[BatteryParams.no_battery()] for _ in range(4)],
        soc=[np.zeros(1) for _ in range(4)],
        w_actual=w, w_pred=[x.copy() for x in w],
        line_limits=lam, efficiencies=eta, dt=DEFAULT_DT, horizon=horizon,
        reference={"kind": CONSTANT, "values": [0.0] * 4}, name="example1",
    )
