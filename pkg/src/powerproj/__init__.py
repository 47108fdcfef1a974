"""Learning feasible transmit powers for multi-cell interference channels.

A small network proposes powers; a differentiable projection (a Euclidean QP
or an iterative correction of the violation measure) makes them satisfy the
per-user rate, per-BS budget and non-negativity constraints, and Frank-Wolfe
optionally refines the result.
"""

from .channel import (Dataset, NetworkConfig, associate_and_sort, gen_dataset, load_dataset, place_nodes,
                      reshape, save_dataset, split_dataset)
from .errors import (ConfigError, Infeasible, InfeasibleInput, NotConverged, PowerProjError,
                     SolverFailure)
from .feasibility import build_Bq_and_radius, feasibility_filter, min_power_profile, spectral_radius
from .problem import (AFFINE, NONLINEAR_RATE, ConstraintKind, ProblemInstance, assemble_affine_constraints,
                      beta_from_alpha, energy_efficiency, eval_constraints, sum_rate_and_grad, violation,
                      violation_derivatives)
from .proj_explicit import (CorrectionConfig, correct_step_gd, correct_step_newton, project_explicit,
                            project_explicit_vjp)
from .proj_implicit import QPSolution, qp_project, qp_vjp
from .refine import FWConfig, frank_wolfe, solve_lp

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "NetworkConfig",
    "associate_and_sort",
    "gen_dataset",
    "load_dataset",
    "place_nodes",
    "reshape",
    "save_dataset",
    "split_dataset",
    "ConfigError",
    "Infeasible",
    "InfeasibleInput",
    "NotConverged",
    "PowerProjError",
    "SolverFailure",
    "build_Bq_and_radius",
    "feasibility_filter",
    "min_power_profile",
    "spectral_radius",
    "AFFINE",
    "NONLINEAR_RATE",
    "ConstraintKind",
    "ProblemInstance",
    "assemble_affine_constraints",
    "beta_from_alpha",
    "energy_efficiency",
    "eval_constraints",
    "sum_rate_and_grad",
    "violation",
    "violation_derivatives",
    "CorrectionConfig",
    "correct_step_gd",
    "correct_step_newton",
    "project_explicit",
    "project_explicit_vjp",
    "QPSolution",
    "qp_project",
    "qp_vjp",
    "FWConfig",
    "frank_wolfe",
    "solve_lp",
]
