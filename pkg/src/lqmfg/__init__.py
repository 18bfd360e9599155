"""Linear-quadratic mean field games, from N players to the population limit.

Finite-N open- and closed-loop Nash equilibria from coupled Riccati ODEs,
their infinite-population limit, the decentralized law built from it, and
numerical checks of the O(1/N) approximation rates.
"""

from .errors import (
    ConfigError, InvalidModelError, LQMFGError, PolicyMismatchError, SimulationBlowUp, SolvabilityError,
)
from .model import ModelParams, TimeGrid, benchmark_params, load_params, upsilon, validate
from .finite import (
    ClosedLoopFiniteSolution, ConvexityReport, FeedbackLaw, OpenLoopFiniteSolution, Provenance,
    check_convexity, closed_loop_gains, open_loop_gains, solve_closed_loop, solve_open_loop,
)
from .limit import LimitSolution, decentralized_law, solve_limit
from .asymptotics import ConvergenceTable, RescaledFamily, convergence_study, gain_convergence, rescale, unrescale
from .simulation import Policy, PolicyKind, PopulationPaths, build_policy, mean_field_error, simulate
from .game import (
    BestResponseSolution, CostEstimate, NashGapReport, best_response, evaluate_cost, nash_gap_study,
    policy_cost, reconstruct_costate, value_function,
)

__version__ = "0.1.0"
