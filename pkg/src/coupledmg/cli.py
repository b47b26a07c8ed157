"""
Command-line front end.

::

    coupledmg generate --kind demo --seed 0 --out runs/scenario
    coupledmg openloop runs/scenario/demo.json --out runs/open
    coupledmg closedloop runs/scenario/demo.json --steps 24 --out runs/closed
    coupledmg verify example1 descent

Every run writes CSV tables readable by :func:`coupledmg.data_io.load_profiles_csv`
and a ``summary.json`` document. The exit status is 0 exactly when the
command finished without error and every enabled check held.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .coordinator import CENTRAL, DISTRIBUTED, BidirConfig, run_bidirectional
from .data_io import (
    CASE_COUNTS,
    Scenario,
    demo_scenario,
    example1_scenario,
    load_scenario,
    save_profiles_csv,
    save_scenario,
)
from .model import BatteryParams, build_microgrid_model
from .mpc import PlantState, run_mpc
from .upper_level import net_exchange
from .verify import SUITES, run_suites

log = logging.getLogger(__name__)

OPEN_LOOP = "open-loop"
CLOSED_LOOP = "closed-loop"


def scenario_digest(scenario: Scenario) -> str:
    """SHA-256 over the scenario's parameters and series."""
    h = hashlib.sha256()
    meta = {
        "dt": scenario.dt, "horizon": scenario.horizon, "start": scenario.start,
        "reference": scenario.reference, "counts": scenario.counts,
        "batteries": [[dataclasses.astuple(p) for p in b] for b in scenario.batteries],
    }
    h.update(json.dumps(meta, sort_keys=True).encode())
    for arr in [scenario.line_limits, scenario.efficiencies, *scenario.soc, *scenario.w_actual, *scenario.w_pred]:
        h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    return h.hexdigest()


@dataclass
class RunReport:
    """Outcome of an open- or closed-loop run.

    ``tables`` maps a CSV file stem to ``(column names, values)`` with one
    row per entry of ``values`` along its second axis.
    """

    digest: str
    mode: str
    iteration_table: List[dict]
    tables: Dict[str, tuple] = field(default_factory=dict)
    seconds: float = 0.0
    summary: dict = field(default_factory=dict)
    ok: bool = True
    error: Optional[str] = None

    def format_table(self) -> str:
        lines = [f"{'iteration':>9}  {'before exchange':>16}  {'after exchange':>16}"]
        for row in self.iteration_table:
            lines.append(f"{row['iteration']:>9}  {row['before_exchange']:>16.6f}  {row['after_exchange']:>16.6f}")
        return "\n".join(lines)

    def write(self, out: Path) -> None:
        out.mkdir(parents=True, exist_ok=True)
        for stem, (names, values) in self.tables.items():
            save_profiles_csv(out / f"{stem}.csv", names, values)
        doc = {
            "mode": self.mode, "scenario_digest": self.digest, "ok": self.ok, "error": self.error,
            "seconds": self.seconds, "iteration_table": self.iteration_table,
            "files": sorted(f"{s}.csv" for s in self.tables), **self.summary,
        }
        with (out / "summary.json").open("w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")


def _override(scenario: Scenario, horizon=None, no_batteries=False, isolated=False) -> Scenario:
    changes = {}
    if horizon is not None:
        changes["horizon"] = int(horizon)
    if no_batteries:
        changes["batteries"] = [[BatteryParams.no_battery() for _ in b] for b in scenario.batteries]
        changes["soc"] = [np.zeros(len(b)) for b in scenario.batteries]
    if isolated:
        M = scenario.n_microgrids
        changes["line_limits"] = np.zeros((M, M))
        changes["efficiencies"] = np.zeros((M, M))
    return dataclasses.replace(scenario, **changes) if changes else scenario


def cmd_generate(
    out,
    kind: str = "demo",
    seed: int = 0,
    households: Sequence[int] = CASE_COUNTS,
    horizon: int = 96,
    days: int = 3,
    perfect_prediction: bool = False,
    name: Optional[str] = None,
) -> Path:
    """Write a scenario document plus its series to directory ``out``.

    Returns the path of the document. The same arguments give
    byte-identical files.
    """
    if kind == "demo":
        if any(int(h) < 1 for h in households) or not households:
            raise ValueError("every microgrid needs at least one household")
        sc = demo_scenario(seed, households, horizon=horizon, days=days, perfect_prediction=perfect_prediction)
    elif kind == "example1":
        sc = example1_scenario(horizon)
    else:
        raise ValueError(f"unknown scenario kind {kind!r}; use demo or example1")
    path = Path(out) / f"{name or sc.name}.json"
    save_scenario(sc, path)
    return path


def cmd_openloop(scenario, config: Optional[BidirConfig] = None, out=None, horizon=None,
                 no_batteries=False, isolated=False) -> RunReport:
    """Run the bidirectional scheme once at the scenario's first step.

    ``scenario`` is a path or a :class:`Scenario`.
    """
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
    sc = _override(sc, horizon, no_batteries, isolated)
    cfg = config or BidirConfig()
    k, N = sc.start, sc.horizon
    t0 = time.perf_counter()
    mgs = [build_microgrid_model(b, N, sc.dt, s, w[:, k:k + N]) for b, s, w in zip(sc.batteries, sc.soc, sc.w_pred)]
    zeta = sc.references(k)
    trace = run_bidirectional(mgs, sc.topology, zeta, cfg)
    seconds = time.perf_counter() - t0

    base = np.array([mg.b for mg in mgs])
    after = trace.z_bar + net_exchange(trace.plan, trace.geometry)
    names, cols = ["step"], [np.arange(k, k + N, dtype=float)]
    for m in range(sc.n_microgrids):
        names += [f"mg{m}_reference", f"mg{m}_before_batteries", f"mg{m}_after_batteries", f"mg{m}_after_exchange"]
        cols += [zeta[m], base[m], trace.z_bar[m], after[m]]
    table = trace.table()
    iters = np.array([[r["iteration"], r["before_exchange"], r["after_exchange"]] for r in table]).T
    after_col = [r["after_exchange"] for r in table]
    monotone = all(b <= a * (1 + 1e-9) + 1e-9 for a, b in zip(after_col, after_col[1:]))
    report = RunReport(
        digest=scenario_digest(sc), mode=OPEN_LOOP, iteration_table=table,
        tables={"iterations": (["iteration", "before_exchange", "after_exchange"], iters),
                "profiles": (names, np.array(cols))},
        seconds=seconds, ok=monotone,
        error=None if monotone else "cost increased between iterations",
        summary={"step": k, "horizon": N, "final_cost": trace.cost, "baseline_cost": trace.baseline_cost,
                 "rounds": len(trace.records), "stop_reason": trace.stop_reason},
    )
    if out is not None:
        report.write(Path(out))
    return report


def cmd_closedloop(scenario, steps: int, config: Optional[BidirConfig] = None, out=None, horizon=None,
                   no_batteries=False, isolated=False, progress=None) -> RunReport:
    """Run ``steps`` receding-horizon steps from the scenario's first step."""
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
    sc = _override(sc, horizon, no_batteries, isolated)
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if steps > sc.max_steps():
        raise ValueError(f"scenario supports at most {sc.max_steps()} closed-loop steps")
    state = PlantState(sc.batteries, sc.soc, sc.w_actual, sc.w_pred, sc.dt, sc.start)
    t0 = time.perf_counter()
    res = run_mpc(state, sc.topology, sc.references, sc.horizon, steps, config, progress=progress)
    seconds = time.perf_counter() - t0

    recs = res.records
    names = ["step", "stage_cost", "iterations", "plan_cost", "feasible", "soc_violation", "seconds"]
    cols = [[r.k for r in recs], [r.stage_cost for r in recs], [r.iterations for r in recs],
            [r.plan_cost for r in recs], [float(r.feasible) for r in recs],
            [r.soc_violation for r in recs], [r.seconds for r in recs]]
    for m in range(sc.n_microgrids):
        names += [f"mg{m}_reference", f"mg{m}_net_consumption", f"mg{m}_before_exchange", f"mg{m}_after_exchange"]
        cols += [[r.reference[m] for r in recs], [float(sc.w_actual[m][:, r.k].sum()) for r in recs],
                 [r.demand_before_exchange[m] for r in recs], [r.demand_after_exchange[m] for r in recs]]
    values = np.array(cols, dtype=float).reshape(len(names), len(recs))
    feasible = all(r.feasible for r in recs)
    report = RunReport(
        digest=scenario_digest(sc), mode=CLOSED_LOOP,
        iteration_table=[{"step": r.k, "stage_cost": r.stage_cost, "feasible": r.feasible} for r in recs],
        tables={"closedloop": (names, values)}, seconds=seconds,
        ok=res.error is None and feasible and len(recs) == steps, error=res.error,
        summary={"start": sc.start, "steps_requested": steps, "steps_completed": len(recs),
                 "horizon": sc.horizon, "total_stage_cost": float(res.stage_costs.sum()),
                 "all_feasible": feasible},
    )
    if out is not None:
        report.write(Path(out))
    return report


def cmd_verify(suites: Sequence[str] = (), seeds: Optional[int] = None):
    """Run self-check suites; returns ``(all passed, results)``."""
    results = run_suites(suites, seeds)
    return all(r.passed for r in results), results


def _config(args) -> BidirConfig:
    return BidirConfig(
        ell_max=args.lmax, epsilon=args.eps,
        rel_epsilon=None if args.rel_eps <= 0 else args.rel_eps,
        lower_mode=args.lower_mode, parallel=args.parallel == "on",
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coupledmg", description="Battery scheduling and power exchange for coupled microgrids.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a scenario")
    g.add_argument("--kind", choices=["demo", "example1"], default="demo")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--households", default=",".join(map(str, CASE_COUNTS)),
                   help="comma-separated household counts, one per microgrid")
    g.add_argument("--horizon", type=int, default=None, help="prediction horizon (96 for demo, 2 for example1)")
    g.add_argument("--days", type=int, default=3)
    g.add_argument("--perfect-prediction", action="store_true")
    g.add_argument("--name", default=None)
    g.add_argument("--out", required=True, help="output directory")

    def runner(name, help_):
        r = sub.add_parser(name, help=help_)
        r.add_argument("scenario", help="scenario document (.json)")
        r.add_argument("--lmax", type=int, default=40, help="maximum rounds")
        r.add_argument("--eps", type=float, default=0.0, help="stop when a round lowers J by at most this")
        r.add_argument("--rel-eps", type=float, default=1e-5, help="relative stopping threshold; 0 disables")
        r.add_argument("--horizon", type=int, default=None, help="override the scenario horizon")
        r.add_argument("--lower-mode", choices=[CENTRAL, DISTRIBUTED], default=CENTRAL)
        r.add_argument("--parallel", choices=["on", "off"], default="off")
        r.add_argument("--no-batteries", action="store_true", help="replace every battery by an empty one")
        r.add_argument("--isolated", action="store_true", help="remove all lines")
        r.add_argument("--out", required=True, help="output directory")
        return r

    runner("openloop", "one run of the bidirectional scheme")
    c = runner("closedloop", "receding-horizon simulation")
    c.add_argument("--steps", type=int, default=24)

    v = sub.add_parser("verify", help="run self-check suites")
    v.add_argument("suites", nargs="*", help=f"any of {', '.join(SUITES)}, all (default)")
    v.add_argument("--seeds", type=int, default=None, help="random scenarios for the descent suite")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            counts = [int(x) for x in args.households.split(",") if x.strip()]
            horizon = args.horizon or (96 if args.kind == "demo" else 2)
            path = cmd_generate(args.out, args.kind, args.seed, counts, horizon, args.days, args.perfect_prediction, args.name)
            print(f"wrote {path}")
            return 0
        if args.command == "verify":
            ok, results = cmd_verify(args.suites, args.seeds)
            for r in results:
                print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<13} {r.seconds:7.1f}s  {r.detail}")
            return 0 if ok else 1
        cfg = _config(args)
        if args.command == "openloop":
            report = cmd_openloop(args.scenario, cfg, args.out, args.horizon, args.no_batteries, args.isolated)
            print(report.format_table())
            print(f"final J = {report.summary['final_cost']:.6g} ({report.summary['stop_reason']}), "
                  f"{report.seconds:.1f}s")
        else:
            def show(rec):
                print(f"step {rec.k}: stage cost {rec.stage_cost:.4g}, {rec.iterations} rounds, "
                      f"{'feasible' if rec.feasible else 'INFEASIBLE'}, {rec.seconds:.1f}s", flush=True)
            report = cmd_closedloop(args.scenario, args.steps, cfg, args.out, args.horizon,
                                    args.no_batteries, args.isolated, progress=show)
            print(f"total stage cost {report.summary['total_stage_cost']:.6g} over "
                  f"{report.summary['steps_completed']} steps, {report.seconds:.1f}s")
        print(f"wrote {args.out}")
        if not report.ok:
            print(f"error: {report.error or 'a per-step check failed'}", file=sys.stderr)
        return 0 if report.ok else 1
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2
