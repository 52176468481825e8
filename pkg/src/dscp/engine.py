"""
Sequential convex programming with a differentiable iteration tape.

scp_forward runs the familiar convexify-solve-update loop and records every
subproblem together with its primal-dual solution.  scp_backward walks the
tape in reverse: each iteration's solution feeds the next iteration only
through the reference trajectory baked into the next subproblem's
coefficients, so one adjoint solve per iteration plus the problem-supplied
coefficient-Jacobian hooks propagate a loss gradient all the way to the
initial reference and to scalar parameters.

A trajectory problem object must provide:

    build_subproblem(params) -> (ConicProgram, hooks)
        hooks.vjp(record, adjoint) -> HookGradients
    reference_update(params, z_star) -> new z_ref array
    lift_ref_seed(params, g_ref) -> seed on the z* layout
        (adjoint of reference_update)
    j2_values(params, program, z_star) -> (J2 at z*, J2 at the reference)

Parameters are split into the reference trajectory z_ref, solver-process
parameters theta_scp (e.g. trust-region weights) and physical/problem
parameters theta_tp (e.g. the final time); gradients accumulate per name
across iterations.
"""

from dataclasses import dataclass, field

import numpy as np

from .socp import SolverSettings, solve
from .sensitivity import (
    ActiveSetTolerances,
    adjoint_solve,
    assemble_sensitivity_system,
    refine_kkt_point,
)


@dataclass
class ParamSet:
    """Subproblem parameter bundle for one SCP iteration."""

    z_ref: np.ndarray
    theta_scp: dict = field(default_factory=dict)
    theta_tp: dict = field(default_factory=dict)

    def with_reference(self, z_ref):
        return ParamSet(
            z_ref=np.asarray(z_ref, dtype=float),
            theta_scp=dict(self.theta_scp),
            theta_tp=dict(self.theta_tp),
        )


@dataclass
class HookGradients:
    """Output of a problem's coefficient-Jacobian hooks for one iteration."""

    d_z_ref: np.ndarray
    d_theta_scp: dict = field(default_factory=dict)
    d_theta_tp: dict = field(default_factory=dict)


@dataclass
class ScpConfig:
    eps_J: float = 1e-3
    max_iter: int = 20
    solver: SolverSettings = field(default_factory=SolverSettings)
    active_tol: ActiveSetTolerances = field(default_factory=ActiveSetTolerances)
    reg_scale: float = 1e-10
    reg_max: float = 1e-6
    polish: bool = True  # Newton-refine each subproblem solution

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        if "eps_J" in d:
            cfg.eps_J = float(d["eps_J"])
        if "max_iter" in d:
            cfg.max_iter = int(d["max_iter"])
        if "polish" in d:
            cfg.polish = bool(d["polish"])
        if "reg_scale" in d:
            cfg.reg_scale = float(d["reg_scale"])
        if "reg_max" in d:
            cfg.reg_max = float(d["reg_max"])
        solver = d.get("solver", {})
        for key in ("tol_feas", "tol_gap_abs", "tol_gap_rel", "stationarity_tol"):
            if key in solver:
                setattr(cfg.solver, key, float(solver[key]))
        if "max_iter" in solver:
            cfg.solver.max_iter = int(solver["max_iter"])
        if "tol_relax_retries" in solver:
            cfg.solver.tol_relax_retries = int(solver["tol_relax_retries"])
        active = d.get("active_tol", {})
        for key in ("eps_res", "eps_mu", "eps_lam", "vertex_tol"):
            if key in active:
                setattr(cfg.active_tol, key, float(active[key]))
        return cfg

    def to_dict(self):
        return {
            "eps_J": self.eps_J,
            "max_iter": self.max_iter,
            "reg_scale": self.reg_scale,
            "reg_max": self.reg_max,
            "polish": self.polish,
            "solver": {
                "tol_feas": self.solver.tol_feas,
                "tol_gap_abs": self.solver.tol_gap_abs,
                "tol_gap_rel": self.solver.tol_gap_rel,
                "stationarity_tol": self.solver.stationarity_tol,
                "max_iter": self.solver.max_iter,
                "tol_relax_retries": self.solver.tol_relax_retries,
            },
            "active_tol": {
                "eps_res": self.active_tol.eps_res,
                "eps_mu": self.active_tol.eps_mu,
                "eps_lam": self.active_tol.eps_lam,
                "vertex_tol": self.active_tol.vertex_tol,
            },
        }


@dataclass
class ScpIterationRecord:
    """One convexify-solve step: parameters in, program, solution out."""

    params: ParamSet
    program: object
    hooks: object
    solution: object
    J2_star: float
    J2_ref: float
    sensitivity: object = None  # assembled lazily by scp_backward


@dataclass
class ScpTape:
    """Recorded SCP run: all iterations plus termination bookkeeping."""

    iterations: list = field(default_factory=list)
    converged: bool = False
    status: str = "empty"  # converged | max_iterations | solver_failure
    failure_status: object = None  # SolverStatus of the failed solve, if any
    failure_iteration: int = -1

    @property
    def n_iterations(self):
        return len(self.iterations)

    @property
    def final_solution(self):
        if not self.iterations:
            raise ValueError("tape has no completed iterations")
        return self.iterations[-1].solution.z

    def j2_history(self):
        return [(rec.J2_ref, rec.J2_star) for rec in self.iterations]


@dataclass
class GradientSet:
    """Loss gradients accumulated over the whole tape."""

    d_theta_scp: dict
    d_theta_tp: dict
    d_z_ref1: np.ndarray
    loss: float = np.nan


def scp_forward(problem, params, config=None):
    """Run SCP to convergence, recording a differentiable tape.

    Convergence: |J2(z*) - J2(z_ref)| < eps_J |J2(z_ref)| with both values
    taken from the CURRENT subproblem's objective.  A solver failure stops
    the loop and is recorded in-band (status/failure_status); it is not an
    exception.  Hitting max_iter leaves converged=False with all iterations
    usable for differentiation.
    """
    if config is None:
        config = ScpConfig()
    tape = ScpTape()
    params = params.with_reference(params.z_ref)
    for k in range(config.max_iter):
        program, hooks = problem.build_subproblem(params)
        sol = solve(program, config.solver)
        if not sol.ok:
            tape.status = "solver_failure"
            tape.failure_status = sol.status
            tape.failure_iteration = k
            return tape
        if config.polish:
            sol = refine_kkt_point(program, sol, tol=config.active_tol)
        J2_star, J2_ref = problem.j2_values(params, program, sol.z)
        tape.iterations.append(
            ScpIterationRecord(
                params=params,
                program=program,
                hooks=hooks,
                solution=sol,
                J2_star=J2_star,
                J2_ref=J2_ref,
            )
        )
        if abs(J2_star - J2_ref) < config.eps_J * abs(J2_ref):
            tape.converged = True
            tape.status = "converged"
            return tape
        params = params.with_reference(problem.reference_update(params, sol.z))
    tape.status = "max_iterations"
    return tape


def _ensure_sensitivity(rec, config):
    if rec.sensitivity is None:
        rec.sensitivity = assemble_sensitivity_system(
            rec.program,
            rec.solution,
            tol=config.active_tol,
            reg_scale=config.reg_scale,
            reg_max=config.reg_max,
        )
    return rec.sensitivity


def propagate_reference_seed(problem, params, hook_grads, direct_seed=None):
    """Seed for the previous iteration's solution.

    The reference of iteration k is the solution of iteration k-1, so the
    z_ref gradient of iteration k lifts (through the problem's reference
    layout) onto the z* layout of iteration k-1; any direct loss seed on
    that solution is added on top.
    """
    g = problem.lift_ref_seed(params, hook_grads.d_z_ref)
    if direct_seed is not None:
        g = g + direct_seed
    return g


def scp_backward(problem, tape, seeds, config=None):
    """Reverse pass over a recorded SCP run.

    seeds is a list with one entry per tape iteration: seeds[k] is the
    explicit gradient of the loss with respect to that iteration's solution
    z*(k) (None for iterations the loss does not touch directly; the last
    entry must be present).  Returns a GradientSet with gradients summed
    over iterations for every named scalar parameter, plus the gradient
    with respect to the initial reference trajectory.
    """
    if config is None:
        config = ScpConfig()
    if not tape.iterations:
        raise ValueError(f"cannot differentiate a tape with status {tape.status!r}")
    K = tape.n_iterations
    if len(seeds) != K:
        raise ValueError(f"need {K} seeds, got {len(seeds)}")
    if seeds[-1] is None:
        raise ValueError("the final iteration's seed is required")

    d_scp, d_tp = {}, {}
    g = np.asarray(seeds[-1], dtype=float)
    d_z_ref = None
    for k in range(K - 1, -1, -1):
        rec = tape.iterations[k]
        sens = _ensure_sensitivity(rec, config)
        adj = adjoint_solve(sens, g)
        hook_grads = rec.hooks.vjp(sens, adj)
        for name, val in hook_grads.d_theta_scp.items():
            d_scp[name] = d_scp.get(name, 0.0) + val
        for name, val in hook_grads.d_theta_tp.items():
            d_tp[name] = d_tp.get(name, 0.0) + val
        d_z_ref = hook_grads.d_z_ref
        if k > 0:
            g = propagate_reference_seed(problem, rec.params, hook_grads, seeds[k - 1])

    return GradientSet(d_theta_scp=d_scp, d_theta_tp=d_tp, d_z_ref1=d_z_ref)


def run_scp(problem, params, config=None):
    """Convenience: forward pass returning (tape, final trajectory or None)."""
    tape = scp_forward(problem, params, config)
    if tape.iterations:
        return tape, tape.final_solution
    return tape, None
