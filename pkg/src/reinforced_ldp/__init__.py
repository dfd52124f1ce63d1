"""Empirical-measure rates for reinforced chains on finite state spaces.

The package covers the full experimental loop: probability primitives
(:mod:`~reinforced_ldp.measures`), chain and controlled-chain simulation
with occupation measures (:mod:`~reinforced_ldp.chains`), exact count
laws (:mod:`~reinforced_ldp.exact`), the discounted-cost rate solver
(:mod:`~reinforced_ldp.ratesolver`), reversed-plan construction and
scheduled runs (:mod:`~reinforced_ldp.lowerbound`), and the acceptance
battery (:mod:`~reinforced_ldp.validation`).
"""

from .errors import (
    ConfigError,
    ConvergenceError,
    DimensionMismatch,
    InfeasibleTrajectory,
    PolicyError,
    PositivityViolation,
    PreconditionViolation,
    ResourceLimitExceeded,
    SimplexViolation,
)
from .measures import (
    Kernel,
    PairMeasure,
    ProbVec,
    build_kernel_mixture,
    build_kernel_qsd,
    kernel_apply,
    relative_entropy,
    stationary_distribution,
)
from .chains import (
    ChainPath,
    ControlledPath,
    DiscountedOccupation,
    PathInterpolant,
    ReversedInterpolant,
    TimeGrid,
    grid_functions,
    interpolate_path,
    occupation_measures,
    path_rng,
    reference_policy,
    reverse_path,
    simulate_chain,
    simulate_chain_batch,
    simulate_controlled,
    simulate_controlled_batch,
    verify_chain_rule_identity,
)
from .exact import (
    CountLaw,
    FiniteNRate,
    event_probability,
    exact_law,
    exact_law_levels,
    finite_n_rate,
)
from .ratesolver import (
    PiecewiseControl,
    RateBracket,
    RateProfileRow,
    SolveDiagnostics,
    SolveOptions,
    TrajectoryGrid,
    cost_gradient,
    discounted_cost,
    integrate_forward,
    project_control,
    rate_profile,
    simplex_mesh,
    simplex_project_rows,
    solve_dv_rate,
    solve_rate,
)
from .lowerbound import (
    CostConvergenceReport,
    CostTrendRow,
    DiscretizeResult,
    KappaSchedule,
    MollifyResult,
    PiecewiseConstantPath,
    PiecewiseLinearPath,
    PlanBounds,
    PlanRun,
    ReversedPlan,
    an_frequency,
    build_plan,
    check_cost_convergence,
    discretize_control,
    estimate_lln_threshold,
    integrate_reversed,
    mix_with_stationary,
    mollify_control,
    plan_to_json,
    reverse_control,
    reversed_cost,
    reversed_flow,
    reversed_flow_nodes,
    run_plan,
)
from .validation import CriterionResult, run_acceptance, write_report_csv

__version__ = "1.0.0"

__all__ = [
    "ChainPath",
    "ConfigError",
    "ControlledPath",
    "ConvergenceError",
    "CostConvergenceReport",
    "CostTrendRow",
    "CountLaw",
    "CriterionResult",
    "DimensionMismatch",
    "DiscountedOccupation",
    "DiscretizeResult",
    "FiniteNRate",
    "InfeasibleTrajectory",
    "KappaSchedule",
    "Kernel",
    "MollifyResult",
    "PairMeasure",
    "PathInterpolant",
    "PiecewiseConstantPath",
    "PiecewiseControl",
    "PiecewiseLinearPath",
    "PlanBounds",
    "PlanRun",
    "PolicyError",
    "PositivityViolation",
    "PreconditionViolation",
    "ProbVec",
    "RateBracket",
    "RateProfileRow",
    "ResourceLimitExceeded",
    "ReversedInterpolant",
    "ReversedPlan",
    "SimplexViolation",
    "SolveDiagnostics",
    "SolveOptions",
    "TimeGrid",
    "TrajectoryGrid",
    "an_frequency",
    "build_kernel_mixture",
    "build_kernel_qsd",
    "build_plan",
    "check_cost_convergence",
    "cost_gradient",
    "discounted_cost",
    "discretize_control",
    "estimate_lln_threshold",
    "event_probability",
    "exact_law",
    "exact_law_levels",
    "finite_n_rate",
    "grid_functions",
    "integrate_forward",
    "integrate_reversed",
    "interpolate_path",
    "kernel_apply",
    "mix_with_stationary",
    "mollify_control",
    "occupation_measures",
    "path_rng",
    "plan_to_json",
    "project_control",
    "rate_profile",
    "reference_policy",
    "relative_entropy",
    "reverse_control",
    "reverse_path",
    "reversed_cost",
    "reversed_flow",
    "reversed_flow_nodes",
    "run_acceptance",
    "run_plan",
    "simplex_mesh",
    "simplex_project_rows",
    "simulate_chain",
    "simulate_chain_batch",
    "simulate_controlled",
    "simulate_controlled_batch",
    "solve_dv_rate",
    "solve_rate",
    "stationary_distribution",
    "verify_chain_rule_identity",
    "write_report_csv",
]
