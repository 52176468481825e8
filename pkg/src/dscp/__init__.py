"""
Differentiable sequential convex programming.

The package solves trajectory optimization problems by sequential convex
programming and computes exact gradients of trajectory-level losses with
respect to problem parameters by differentiating through every conic
subproblem of the solve, iteration by iteration.
"""

from .socp import (
    ConicProgram,
    PrimalDualSolution,
    SocConstraint,
    SolverSettings,
    SolverStatus,
    program_from_json,
    program_to_json,
    solve,
    validate,
)
from .sensitivity import (
    ActiveSets,
    ActiveSetTolerances,
    AdjointVectors,
    CoefficientGradients,
    CoefficientPerturbation,
    ConePerturbation,
    ConeVertexError,
    SensitivityError,
    SensitivityRecord,
    adjoint_solve,
    apply_perturbation,
    assemble_sensitivity_system,
    detect_active_sets,
    extract_coefficient_gradients,
    forward_directional_derivative,
)
from .engine import (
    GradientSet,
    ParamSet,
    ScpConfig,
    ScpIterationRecord,
    ScpTape,
    scp_backward,
    scp_forward,
)

__version__ = "0.1.0"

__all__ = [
    "ConicProgram",
    "SocConstraint",
    "PrimalDualSolution",
    "SolverSettings",
    "SolverStatus",
    "solve",
    "validate",
    "program_to_json",
    "program_from_json",
    "ActiveSets",
    "ActiveSetTolerances",
    "AdjointVectors",
    "CoefficientGradients",
    "CoefficientPerturbation",
    "ConePerturbation",
    "ConeVertexError",
    "SensitivityError",
    "SensitivityRecord",
    "detect_active_sets",
    "assemble_sensitivity_system",
    "forward_directional_derivative",
    "adjoint_solve",
    "extract_coefficient_gradients",
    "apply_perturbation",
    "ParamSet",
    "ScpConfig",
    "ScpTape",
    "ScpIterationRecord",
    "GradientSet",
    "scp_forward",
    "scp_backward",
]
