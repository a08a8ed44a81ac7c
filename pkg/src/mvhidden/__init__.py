"""Mean-variance control with a hidden Markov regime.

Wonham filtering, Markov chain approximation of the filtered dynamics,
backward value iteration with a Lagrange-multiplier search, and closed-loop
Monte Carlo validation.
"""

__version__ = "0.1.0"

from .chain import GridSpec, check_cfl, local_consistency_stats, p_transition_terms, x_transition_probs
from .model import RegimeModel, control_set, example_71, load_model, validate_model
from .simulate import McReport, mc_estimate, sample_ctmc_path, simulate_closed_loop
from .solver import (
    FrontierPoint,
    PolicyGrid,
    SolverConfig,
    ValueGrid,
    efficient_frontier,
    optimize_lambda,
    solve,
)
from .wonham import FilterConfig, FilterState, filter_step, filter_step_penalized

__all__ = [
    "FilterConfig",
    "FilterState",
    "FrontierPoint",
    "GridSpec",
    "McReport",
    "PolicyGrid",
    "RegimeModel",
    "SolverConfig",
    "ValueGrid",
    "check_cfl",
    "control_set",
    "efficient_frontier",
    "example_71",
    "filter_step",
    "filter_step_penalized",
    "load_model",
    "local_consistency_stats",
    "mc_estimate",
    "optimize_lambda",
    "p_transition_terms",
    "sample_ctmc_path",
    "simulate_closed_loop",
    "solve",
    "validate_model",
    "x_transition_probs",
]
