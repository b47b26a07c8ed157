"""
Battery scheduling and power exchange for coupled microgrids.

Microgrid operators shape their aggregated demand with household
batteries; an exchange operator moves power between neighbouring
microgrids. :func:`run_bidirectional` alternates both levels until the
overall tracking cost stops improving, and :func:`run_mpc` wraps it in a
receding-horizon loop.
"""

from .coordinator import (
    BidirConfig,
    IterationRecord,
    IterationTrace,
    WarmStart,
    evaluate_overall_objective,
    local_costs,
    run_bidirectional,
)
from .data_io import (
    Profiles,
    Scenario,
    demo_scenario,
    example1_scenario,
    load_profiles_csv,
    load_scenario,
    reference_profiles,
    reference_trajectory,
    save_profiles_csv,
    save_scenario,
    synthesize_batteries,
)
from .lower_level import (
    LocalSolution,
    SplittingSettings,
    aggregate_demand,
    local_objective,
    solve_local_central,
    solve_local_distributed,
)
from .model import (
    BatteryParams,
    MicrogridModel,
    NetworkTopology,
    ResidentialSystem,
    build_microgrid_model,
    microgrid_from_systems,
    validate_topology,
)
from .mpc import ClosedLoopRecord, ClosedLoopResult, PlantState, run_mpc
from .qp import QpProblem, QpSettings, QpSolution, solve_qp
from .upper_level import (
    ExchangeGeometry,
    ExchangePlan,
    build_exchange_vectors,
    net_exchange,
    solve_exchange,
    solve_exchange_step,
)

__version__ = "0.1.0"
