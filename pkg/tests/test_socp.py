"""Tests for the cone-program container and the solver wrapper."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dscp.socp import (
    ConicProgram,
    SocConstraint,
    SolverSettings,
    SolverStatus,
    program_from_dict,
    program_from_json,
    program_to_dict,
    program_to_json,
    solve,
    stationarity_residual,
    validate,
)
from dscp.randprog import make_random_socp


def cone_projection_program():
    """Project the point (2, 0) onto the cone z2 >= |z1|.

    Analytic optimum: z* = (1, 1) with cone multiplier (1, -1).
    """
    cone = SocConstraint(
        a=np.array([0.0, 1.0]),
        b=0.0,
        G=np.array([[1.0, 0.0]]),
        h=np.array([0.0]),
    )
    return ConicProgram(
        Q=np.eye(2),
        c=np.array([-2.0, 0.0]),
        A=np.zeros((0, 2)),
        b0=np.zeros(0),
        G0=np.zeros((0, 2)),
        h0=np.zeros(0),
        cones=[cone],
    )


def bound_qp_program():
    """min 0.5 (z - 2)^2 subject to z <= 1: optimum z* = 1, mu* = 1."""
    return ConicProgram(
        Q=np.array([[1.0]]),
        c=np.array([-2.0]),
        A=np.zeros((0, 1)),
        b0=np.zeros(0),
        G0=np.array([[1.0]]),
        h0=np.array([1.0]),
        cones=[],
    )


def equality_qp_program(rng, n=6, p=2):
    L = rng.standard_normal((n, n))
    Q = L @ L.T + np.eye(n)
    c = rng.standard_normal(n)
    A = rng.standard_normal((p, n))
    b0 = rng.standard_normal(p)
    return ConicProgram(
        Q=Q, c=c, A=A, b0=b0,
        G0=np.zeros((0, n)), h0=np.zeros(0), cones=[],
    )


class TestContainers:
    def test_dimensions(self):
        program = cone_projection_program()
        assert program.n == 2
        assert program.p == 0
        assert program.q == 0
        assert program.cones[0].dim == 2

    def test_cone_residual_split(self):
        cone = SocConstraint(
            a=np.array([1.0, 2.0]),
            b=0.5,
            G=np.array([[0.0, 1.0], [1.0, 0.0]]),
            h=np.array([0.1, -0.2]),
        )
        z = np.array([1.0, -1.0])
        g0, g1 = cone.residual(z)
        assert g0 == pytest.approx(1.0 - 2.0 + 0.5)
        np.testing.assert_allclose(g1, [-1.0 + 0.1, 1.0 - 0.2])

    def test_objective_value(self):
        program = bound_qp_program()
        assert program.objective_value(np.array([1.0])) == pytest.approx(0.5 - 2.0)

    def test_validate_clean_program(self):
        assert validate(cone_projection_program()) == []

    def test_validate_flags_asymmetric_q(self):
        program = cone_projection_program()
        program.Q[0, 1] = 0.3
        assert any("symmetric" in s for s in validate(program))

    def test_validate_flags_shape_mismatch(self):
        program = bound_qp_program()
        program.h0 = np.array([1.0, 2.0])
        assert any("h0" in s for s in validate(program))

    def test_validate_flags_nonfinite(self):
        program = bound_qp_program()
        program.c = np.array([np.nan])
        assert any("non-finite" in s for s in validate(program))

    def test_validate_flags_degenerate_cone(self):
        program = cone_projection_program()
        program.cones[0] = SocConstraint(
            a=np.array([0.0, 1.0]), b=0.0,
            G=np.zeros((0, 2)), h=np.zeros(0),
        )
        assert any("dimension" in s for s in validate(program))

    def test_solve_rejects_invalid_program(self):
        program = bound_qp_program()
        program.c = np.array([np.inf])
        with pytest.raises(ValueError, match="invalid program"):
            solve(program)


class TestSolve:
    def test_cone_projection_optimum(self):
        sol = solve(cone_projection_program())
        assert sol.status is SolverStatus.OPTIMAL
        assert sol.ok
        np.testing.assert_allclose(sol.z, [1.0, 1.0], atol=1e-7)
        np.testing.assert_allclose(sol.lambdas[0], [1.0, -1.0], atol=1e-7)
        assert sol.stationarity < 1e-7

    def test_bound_qp_optimum(self):
        sol = solve(bound_qp_program())
        assert sol.ok
        assert sol.z[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.mu[0] == pytest.approx(1.0, abs=1e-8)

    def test_equality_qp_matches_kkt_solve(self):
        rng = np.random.default_rng(3)
        program = equality_qp_program(rng)
        n, p = program.n, program.p
        Q = program.Q.toarray()
        A = program.A.toarray()
        kkt = np.block([[Q, A.T], [A, np.zeros((p, p))]])
        ref = np.linalg.solve(kkt, np.concatenate([-program.c, program.b0]))
        sol = solve(program)
        assert sol.ok
        np.testing.assert_allclose(sol.z, ref[:n], atol=1e-7)
        np.testing.assert_allclose(sol.nu, ref[n:], atol=1e-7)

    def test_primal_infeasible_detected(self):
        # z <= -1 and -z <= -1 cannot both hold
        program = ConicProgram(
            Q=np.array([[1.0]]),
            c=np.zeros(1),
            A=np.zeros((0, 1)),
            b0=np.zeros(0),
            G0=np.array([[1.0], [-1.0]]),
            h0=np.array([-1.0, -1.0]),
            cones=[],
        )
        sol = solve(program)
        assert sol.status is SolverStatus.PRIMAL_INFEASIBLE
        assert not sol.ok

    def test_unbounded_detected(self):
        program = ConicProgram(
            Q=np.zeros((1, 1)),
            c=np.array([1.0]),
            A=np.zeros((0, 1)),
            b0=np.zeros(0),
            G0=np.array([[1.0]]),
            h0=np.array([0.0]),
            cones=[],
        )
        sol = solve(program)
        assert sol.status is SolverStatus.DUAL_INFEASIBLE

    def test_solve_is_deterministic(self):
        rng = np.random.default_rng(7)
        program = make_random_socp(rng)
        s1 = solve(program)
        s2 = solve(program)
        assert np.array_equal(s1.z, s2.z)
        assert np.array_equal(s1.mu, s2.mu)
        assert s1.iterations == s2.iterations

    def test_duals_satisfy_stationarity(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            program = make_random_socp(rng)
            sol = solve(program)
            if not sol.ok:
                continue
            res = stationarity_residual(program, sol.z, sol.nu, sol.mu, sol.lambdas)
            assert res < 1e-6

    def test_dual_cone_membership(self):
        """Returned cone multipliers must lie in the (self-dual) cone."""
        rng = np.random.default_rng(13)
        checked = 0
        while checked < 5:
            program = make_random_socp(rng)
            if not program.cones:
                continue
            sol = solve(program)
            if not sol.ok:
                continue
            for lam in sol.lambdas:
                assert lam[0] >= np.linalg.norm(lam[1:]) - 1e-7
            checked += 1


class TestSerialization:
    def test_roundtrip_preserves_every_coefficient(self):
        rng = np.random.default_rng(5)
        program = make_random_socp(rng)
        back = program_from_dict(program_to_dict(program))
        assert np.array_equal(back.Q.toarray(), program.Q.toarray())
        assert np.array_equal(back.c, program.c)
        assert np.array_equal(back.A.toarray(), program.A.toarray())
        assert np.array_equal(back.b0, program.b0)
        assert np.array_equal(back.G0.toarray(), program.G0.toarray())
        assert np.array_equal(back.h0, program.h0)
        assert len(back.cones) == len(program.cones)
        for ca, cb in zip(program.cones, back.cones):
            assert np.array_equal(ca.a, cb.a)
            assert ca.b == cb.b
            assert np.array_equal(ca.G.toarray(), cb.G.toarray())
            assert np.array_equal(ca.h, cb.h)

    def test_json_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        program = make_random_socp(rng)
        path = tmp_path / "prog.json"
        program_to_json(program, path)
        back = program_from_json(path)
        assert np.array_equal(back.c, program.c)
        s1 = solve(program)
        s2 = solve(back)
        assert np.array_equal(s1.z, s2.z)

    def test_schema_version_checked(self):
        d = program_to_dict(bound_qp_program())
        d["schema_version"] = 999
        with pytest.raises(ValueError, match="schema_version"):
            program_from_dict(d)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_random_programs_solve_consistently(seed):
    """Any solved random program must return self-consistent primal-duals."""
    rng = np.random.default_rng(seed)
    program = make_random_socp(rng)
    sol = solve(program)
    if not sol.ok:
        return  # status reporting, not solvability, is under test here
    # primal feasibility
    if program.p:
        np.testing.assert_allclose(program.A @ sol.z, program.b0, atol=1e-6)
    if program.q:
        assert (program.G0 @ sol.z - program.h0).max() < 1e-6
    for cone in program.cones:
        g0, g1 = cone.residual(sol.z)
        assert g0 >= np.linalg.norm(g1) - 1e-6
    # dual feasibility and stationarity
    assert sol.mu.min(initial=0.0) > -1e-7
    for lam in sol.lambdas:
        assert lam[0] >= np.linalg.norm(lam[1:]) - 1e-6
    assert sol.stationarity < 1e-6
