"""Tests for the SCP forward/backward engine on a scalar toy iteration.

The toy subproblem is min 0.5 z^2 - (theta * r + beta) z with reference r,
whose solution is z* = theta r + beta.  Running the loop is then the affine
fixed-point iteration z_k = theta z_{k-1} + beta, for which every gradient
the engine must produce has a closed form:

    d z_K / d r_1    = theta^K
    d z_K / d theta  = sum_{j=1..K} theta^(j-1) z_{K-j}
    d z_K / d beta   = sum_{j=0..K-1} theta^j
"""

import numpy as np
import pytest

from dscp.engine import (
    GradientSet,
    HookGradients,
    ParamSet,
    ScpConfig,
    propagate_reference_seed,
    run_scp,
    scp_backward,
    scp_forward,
)
from dscp.socp import ConicProgram, SolverStatus
from dscp.sensitivity import extract_coefficient_gradients


class AffineToyProblem:
    """Scalar contraction z <- theta z + beta dressed up as an SCP problem."""

    def __init__(self, fail_at_iteration=None):
        self.fail_at_iteration = fail_at_iteration
        self.build_count = 0

    def build_subproblem(self, params):
        r = float(params.z_ref[0])
        theta = params.theta_scp["theta"]
        beta = params.theta_tp["beta"]
        if self.fail_at_iteration is not None and self.build_count == self.fail_at_iteration:
            # two contradictory bounds make the subproblem infeasible
            program = ConicProgram(
                Q=np.array([[1.0]]),
                c=np.array([0.0]),
                A=np.zeros((0, 1)),
                b0=np.zeros(0),
                G0=np.array([[1.0], [-1.0]]),
                h0=np.array([-1.0, -1.0]),
                cones=[],
            )
        else:
            program = ConicProgram(
                Q=np.array([[1.0]]),
                c=np.array([-(theta * r + beta)]),
                A=np.zeros((0, 1)),
                b0=np.zeros(0),
                G0=np.zeros((0, 1)),
                h0=np.zeros(0),
                cones=[],
            )
        self.build_count += 1
        return program, AffineToyHooks(r, theta, beta)

    def reference_update(self, params, z_star):
        return z_star.copy()

    def lift_ref_seed(self, params, g_ref):
        return np.asarray(g_ref, dtype=float)

    def j2_values(self, params, program, z_star):
        J2_star = program.objective_value(z_star)
        J2_ref = program.objective_value(params.z_ref)
        return J2_star, J2_ref


class AffineToyHooks:
    """Pull the c-coefficient gradient back to (r, theta, beta)."""

    def __init__(self, r, theta, beta):
        self.r = r
        self.theta = theta
        self.beta = beta

    def vjp(self, record, adjoint):
        grads = extract_coefficient_gradients(record, adjoint)
        dc = grads.dc[0]  # c = -(theta r + beta)
        return HookGradients(
            d_z_ref=np.array([-dc * self.theta]),
            d_theta_scp={"theta": -dc * self.r},
            d_theta_tp={"beta": -dc},
        )


def toy_params(r0=1.0, theta=0.6, beta=0.8):
    return ParamSet(
        z_ref=np.array([r0]),
        theta_scp={"theta": theta},
        theta_tp={"beta": beta},
    )


def analytic_iterates(r0, theta, beta, K):
    z = [r0]
    for _ in range(K):
        z.append(theta * z[-1] + beta)
    return z  # z[0] is the initial reference


class TestForward:
    def test_iterates_match_recursion(self):
        problem = AffineToyProblem()
        cfg = ScpConfig(eps_J=1e-6, max_iter=30)
        tape = scp_forward(problem, toy_params(), cfg)
        assert tape.converged
        assert tape.status == "converged"
        zs = analytic_iterates(1.0, 0.6, 0.8, tape.n_iterations)
        for k, rec in enumerate(tape.iterations):
            assert rec.solution.z[0] == pytest.approx(zs[k + 1], abs=1e-8)
            assert rec.params.z_ref[0] == pytest.approx(zs[k], abs=1e-8)

    def test_convergence_criterion_is_relative_j2_gap(self):
        problem = AffineToyProblem()
        cfg = ScpConfig(eps_J=1e-6, max_iter=50)
        tape = scp_forward(problem, toy_params(), cfg)
        # every recorded gap except the last must violate the test
        for rec in tape.iterations[:-1]:
            assert abs(rec.J2_star - rec.J2_ref) >= cfg.eps_J * abs(rec.J2_ref)
        last = tape.iterations[-1]
        assert abs(last.J2_star - last.J2_ref) < cfg.eps_J * abs(last.J2_ref)

    def test_max_iterations_is_not_an_error(self):
        problem = AffineToyProblem()
        cfg = ScpConfig(eps_J=1e-16, max_iter=4)
        tape = scp_forward(problem, toy_params(), cfg)
        assert not tape.converged
        assert tape.status == "max_iterations"
        assert tape.n_iterations == 4

    def test_solver_failure_recorded_in_band(self):
        problem = AffineToyProblem(fail_at_iteration=2)
        cfg = ScpConfig(eps_J=1e-16, max_iter=10)
        tape = scp_forward(problem, toy_params(), cfg)
        assert tape.status == "solver_failure"
        assert tape.failure_iteration == 2
        assert tape.failure_status is SolverStatus.PRIMAL_INFEASIBLE
        assert tape.n_iterations == 2  # the failed solve is not on the tape

    def test_run_scp_returns_final_trajectory(self):
        problem = AffineToyProblem()
        tape, z_final = run_scp(problem, toy_params(), ScpConfig(eps_J=1e-6, max_iter=30))
        assert z_final is not None
        assert z_final[0] == pytest.approx(tape.iterations[-1].solution.z[0])

    def test_failed_first_iteration_yields_empty_tape(self):
        problem = AffineToyProblem(fail_at_iteration=0)
        tape, z_final = run_scp(problem, toy_params())
        assert z_final is None
        assert tape.n_iterations == 0
        with pytest.raises(ValueError):
            tape.final_solution


class TestBackward:
    def run_forward(self, K, r0=1.0, theta=0.6, beta=0.8):
        problem = AffineToyProblem()
        cfg = ScpConfig(eps_J=1e-16, max_iter=K)  # fixed iteration count
        tape = scp_forward(problem, toy_params(r0, theta, beta), cfg)
        assert tape.n_iterations == K
        return problem, cfg, tape

    def test_terminal_gradient_closed_form(self):
        K, r0, theta, beta = 5, 1.3, 0.6, 0.8
        problem, cfg, tape = self.run_forward(K, r0, theta, beta)
        seeds = [None] * (K - 1) + [np.array([1.0])]
        grads = scp_backward(problem, tape, seeds, cfg)

        zs = analytic_iterates(r0, theta, beta, K)
        d_theta = sum(theta ** (j - 1) * zs[K - j] for j in range(1, K + 1))
        d_beta = sum(theta ** j for j in range(K))
        assert grads.d_z_ref1[0] == pytest.approx(theta ** K, rel=1e-8)
        assert grads.d_theta_scp["theta"] == pytest.approx(d_theta, rel=1e-8)
        assert grads.d_theta_tp["beta"] == pytest.approx(d_beta, rel=1e-8)

    def test_terminal_gradient_matches_finite_difference(self):
        K = 4
        problem, cfg, tape = self.run_forward(K)
        seeds = [None] * (K - 1) + [np.array([1.0])]
        grads = scp_backward(problem, tape, seeds, cfg)

        def loss(theta, beta, r0):
            p = AffineToyProblem()
            t = scp_forward(p, toy_params(r0, theta, beta), cfg)
            return t.final_solution[0]

        h = 1e-6
        fd_theta = (loss(0.6 + h, 0.8, 1.0) - loss(0.6 - h, 0.8, 1.0)) / (2 * h)
        fd_beta = (loss(0.6, 0.8 + h, 1.0) - loss(0.6, 0.8 - h, 1.0)) / (2 * h)
        fd_r = (loss(0.6, 0.8, 1.0 + h) - loss(0.6, 0.8, 1.0 - h)) / (2 * h)
        assert grads.d_theta_scp["theta"] == pytest.approx(fd_theta, rel=1e-5)
        assert grads.d_theta_tp["beta"] == pytest.approx(fd_beta, rel=1e-5)
        assert grads.d_z_ref1[0] == pytest.approx(fd_r, rel=1e-5)

    def test_per_iteration_seeds_accumulate(self):
        """Loss sum_k z_k needs a seed on every iterate, not just the last."""
        K = 4
        problem, cfg, tape = self.run_forward(K)
        seeds = [np.array([1.0]) for _ in range(K)]
        grads = scp_backward(problem, tape, seeds, cfg)

        def loss(theta, beta):
            p = AffineToyProblem()
            t = scp_forward(p, toy_params(1.0, theta, beta), cfg)
            return sum(rec.solution.z[0] for rec in t.iterations)

        h = 1e-6
        fd_theta = (loss(0.6 + h, 0.8) - loss(0.6 - h, 0.8)) / (2 * h)
        fd_beta = (loss(0.6, 0.8 + h) - loss(0.6, 0.8 - h)) / (2 * h)
        assert grads.d_theta_scp["theta"] == pytest.approx(fd_theta, rel=1e-5)
        assert grads.d_theta_tp["beta"] == pytest.approx(fd_beta, rel=1e-5)

    def test_single_iteration_chain(self):
        problem, cfg, tape = self.run_forward(1)
        grads = scp_backward(problem, tape, [np.array([1.0])], cfg)
        assert grads.d_z_ref1[0] == pytest.approx(0.6, rel=1e-9)
        assert grads.d_theta_tp["beta"] == pytest.approx(1.0, rel=1e-9)

    def test_seed_validation(self):
        problem, cfg, tape = self.run_forward(3)
        with pytest.raises(ValueError, match="seeds"):
            scp_backward(problem, tape, [np.array([1.0])], cfg)
        with pytest.raises(ValueError, match="final"):
            scp_backward(problem, tape, [None, None, None], cfg)

    def test_empty_tape_rejected(self):
        problem = AffineToyProblem(fail_at_iteration=0)
        tape = scp_forward(problem, toy_params())
        with pytest.raises(ValueError, match="status"):
            scp_backward(problem, tape, [])

    def test_sensitivity_records_are_cached(self):
        problem, cfg, tape = self.run_forward(3)
        seeds = [None, None, np.array([1.0])]
        scp_backward(problem, tape, seeds, cfg)
        kept = [rec.sensitivity for rec in tape.iterations]
        assert all(s is not None for s in kept)
        scp_backward(problem, tape, seeds, cfg)
        assert [rec.sensitivity for rec in tape.iterations] == kept


class TestConfig:
    def test_dict_roundtrip(self):
        cfg = ScpConfig(eps_J=1e-4, max_iter=11)
        cfg.solver.tol_feas = 1e-9
        cfg.active_tol.eps_res = 1e-7
        back = ScpConfig.from_dict(cfg.to_dict())
        assert back.eps_J == cfg.eps_J
        assert back.max_iter == cfg.max_iter
        assert back.solver.tol_feas == cfg.solver.tol_feas
        assert back.active_tol.eps_res == cfg.active_tol.eps_res

    def test_propagate_reference_seed_adds_direct_seed(self):
        problem = AffineToyProblem()
        params = toy_params()
        hook_grads = HookGradients(d_z_ref=np.array([2.0]))
        g = propagate_reference_seed(problem, params, hook_grads, np.array([0.5]))
        assert g[0] == pytest.approx(2.5)
        g = propagate_reference_seed(problem, params, hook_grads, None)
        assert g[0] == pytest.approx(2.0)
