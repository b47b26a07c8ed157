"""
Four battery-less microgrids on a line: the outer two hold a 10 kW surplus
and a 10 kW deficit, the inner two are balanced. Exchange alone can settle
everything, so the final cost must be zero.

Run with ``python demos/example1_chain.py``.
"""

import numpy as np

from coupledmg import (
    ExchangePlan,
    build_exchange_vectors,
    build_microgrid_model,
    evaluate_overall_objective,
    example1_scenario,
    net_exchange,
    run_bidirectional,
)


def main():
    sc = example1_scenario(horizon=2)
    mgs = [build_microgrid_model(b, sc.horizon, sc.dt, s, w) for b, s, w in zip(sc.batteries, sc.soc, sc.w_pred)]
    trace = run_bidirectional(mgs, sc.topology, sc.references(0))

    print("demands per microgrid:", [float(mg.b[0]) for mg in mgs])
    print(f"cost without exchange: {trace.baseline_cost:g}")
    for row in trace.table():
        print(f"  round {row['iteration']}: before exchange {row['before_exchange']:10.4g}  "
              f"after {row['after_exchange']:10.4g}")
    print("exchange at step 0:", np.round(net_exchange(trace.plan, trace.geometry)[:, 0], 6))
    fractions = {d: round(float(v), 6) for d, v in zip(trace.plan.directions, trace.plan.delta[0])}
    print("line fractions at step 0:", fractions)

    # if only neighbours could balance, the middle pair would split the imbalance
    g = build_exchange_vectors(sc.topology)
    stuck = evaluate_overall_objective(np.array([[-5.0], [-5.0], [5.0], [5.0]]), ExchangePlan.zeros(g, 1),
                                       np.zeros((4, 1)), g)
    print(f"cost when stuck at (-5, -5, 5, 5): {stuck:g}")


if __name__ == "__main__":
    main()
