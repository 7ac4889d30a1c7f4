"""Epidemic containment on temporal contact networks.

Certified SIS upper bounds on piecewise-constant contact networks, convex
allocation of transmission and recovery investments against those bounds,
and exact and Monte Carlo reference solutions of the stochastic process.
"""
from .allocation import (SolveReport, SolverOptions, solve_budget_constrained, solve_feasibility,
                         solve_performance_constrained, solve_static_baseline, verify_allocation)
from .bounds import Allocation, RateBounds, expm_action, propagate_bound, propagate_with_sensitivity
from .contacts import (TemporalNetwork, aggregate_static, build_temporal_network, read_contacts,
                       synthesize_school_like)
from .costs import CostModel, normalize_costs, total_cost
from .objectives import evaluate, make_integral, make_terminal_lq
from .stochastic import gillespie_run, master_equation_marginals, mc_estimate_objective, mc_marginals

__version__ = "0.1.0"

__all__ = [
    "Allocation", "CostModel", "RateBounds", "SolveReport", "SolverOptions", "TemporalNetwork",
    "aggregate_static", "build_temporal_network", "evaluate", "expm_action", "gillespie_run",
    "make_integral", "make_terminal_lq", "master_equation_marginals", "mc_estimate_objective",
    "mc_marginals", "normalize_costs", "propagate_bound", "propagate_with_sensitivity",
    "read_contacts", "solve_budget_constrained", "solve_feasibility",
    "solve_performance_constrained", "solve_static_baseline", "synthesize_school_like",
    "total_cost", "verify_allocation",
]
