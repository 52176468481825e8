"""Tests for the powered-descent problem: dynamics oracles, subproblem
structure, guess differentiation, full-pipeline gradients, and the physical
replay.

Oracle values are derived independently of the implementation:
  - mass flow at the thrust floor: |u|/(Isp g0) = 169000 / (282 * 9.80655)
    = 61.1113 kg/s
  - hover: u = m g0 e_x cancels gravity exactly, so vdot = 0
  - variable count at N = 50: 51 nodes * 10 + 50 virtual blocks * 7 = 860
"""

import json

import numpy as np
import pytest

from dscp.engine import ScpConfig
from dscp.pdg import (
    NW,
    NX,
    PdgConfig,
    PdgProblem,
    ZeroThrustError,
    pack_reference,
    pdg_loss_gradient,
    rk4_verify,
    run_pdg,
    scaled_boundary_state,
    split_reference,
    terminal_time_sweep,
    trajectory_table,
)


@pytest.fixture(scope="module")
def cfg():
    return PdgConfig()


@pytest.fixture(scope="module")
def prob(cfg):
    return PdgProblem(cfg)


@pytest.fixture(scope="module")
def run33(cfg, prob):
    res = run_pdg(cfg, 33.0, None, prob)
    assert res.converged, res.status
    return res


# -- dynamics oracles --------------------------------------------------------


def test_mass_flow_at_thrust_floor(cfg, prob):
    x = scaled_boundary_state(cfg)
    u = np.array([cfg.u_min / cfg.u_scale, 0.0, 0.0])
    f = prob.model.f(x, u)
    mdot_phys = f[6] * cfg.m0  # mass fraction rate times wet mass, per second
    assert mdot_phys == pytest.approx(-61.1113, abs=1e-3)


def test_hover_balance(cfg, prob):
    # thrust m*g0 straight up cancels gravity for any mass fraction
    for frac in (1.0, 0.85):
        x = scaled_boundary_state(cfg)
        x[3:6] = 0.0
        x[6] = frac
        u = np.array([frac, 0.0, 0.0])  # u_scale = m0 g0
        f = prob.model.f(x, u)
        np.testing.assert_allclose(f[:6], 0.0, atol=1e-14)


def test_jacobian_matches_fd(cfg, prob):
    rng = np.random.default_rng(3)
    x = scaled_boundary_state(cfg) + 0.1 * rng.standard_normal(NX)
    x[6] = 0.9
    u = np.array([0.8, 0.1, -0.2])
    J = prob.model.jacobian(x, u)
    h = 1e-6
    w = np.concatenate([x, u])
    for k in range(NW):
        dp, dm = w.copy(), w.copy()
        dp[k] += h
        dm[k] -= h
        fd = (prob.model.f(dp[:NX], dp[NX:]) - prob.model.f(dm[:NX], dm[NX:])) / (2 * h)
        np.testing.assert_allclose(J[:, k], fd, atol=1e-7)


def test_hessian_matches_fd(cfg, prob):
    rng = np.random.default_rng(4)
    x = scaled_boundary_state(cfg)
    x[6] = 0.8
    u = np.array([0.7, -0.1, 0.15])
    H = prob.model.hessian(x, u)  # (NX, NW, NW)
    h = 1e-5
    w = np.concatenate([x, u])
    for k in rng.choice(NW, size=4, replace=False):
        dp, dm = w.copy(), w.copy()
        dp[k] += h
        dm[k] -= h
        fd = (
            prob.model.jacobian(dp[:NX], dp[NX:])
            - prob.model.jacobian(dm[:NX], dm[NX:])
        ) / (2 * h)
        np.testing.assert_allclose(H[:, :, k], fd, atol=1e-6)


# -- layout and subproblem structure ----------------------------------------


def test_variable_and_constraint_counts(cfg, prob):
    assert prob.n_vars == 860
    assert prob.n_ref == 510
    z_ref, _ = prob.initial_reference(33.0)
    program, _ = prob.build_subproblem(prob.params_for(33.0, z_ref))
    N = cfg.N
    assert program.A.shape == (NX * N + NX + 6, 860)
    assert program.G0.shape == (N + 1, 860)          # thrust floor cuts
    assert len(program.cones) == (N + 1) + (N + 1) + N  # pointing, cap, glide


def test_zero_thrust_reference_rejected(cfg, prob):
    z_ref, _ = prob.initial_reference(33.0)
    X, U = split_reference(z_ref, cfg.N)
    U = U.copy()
    U[:, 5] = 0.0
    with pytest.raises(ZeroThrustError):
        prob.build_subproblem(prob.params_for(33.0, pack_reference(X, U)))


def test_guess_hits_boundary_conditions(cfg, prob):
    z_ref, guess = prob.initial_reference(33.0)
    assert guess.ok
    X, U = split_reference(z_ref, cfg.N)
    x0 = scaled_boundary_state(cfg)
    np.testing.assert_allclose(X[:6, 0], x0[:6], atol=1e-9)
    np.testing.assert_allclose(X[:6, -1], 0.0, atol=1e-9)
    np.testing.assert_allclose(X[6], 1.0)  # frozen mass fraction


def test_hover_guess_closed_form(prob):
    # stationary start over the pad: minimizing sum_m |u_m|^2 subject to the
    # trapezoidal velocity chain gives u_m proportional to the quadrature
    # weight (1/2, 1, ..., 1, 1/2), normalized to the gravity impulse:
    # interior N/(N - 1/2), endpoints half that
    cfg = PdgConfig(r0=(1000.0, 0.0, 0.0), v0=(0.0, 0.0, 0.0),
                    r_f=(1000.0, 0.0, 0.0))
    p = PdgProblem(cfg)
    z_ref, _ = p.initial_reference(30.0)
    X, U = split_reference(z_ref, cfg.N)
    N = cfg.N
    interior = N / (N - 0.5)
    np.testing.assert_allclose(U[0, 1:-1], interior, atol=1e-8)
    np.testing.assert_allclose(U[0, [0, -1]], interior / 2, atol=1e-8)
    np.testing.assert_allclose(U[1:], 0.0, atol=1e-8)


def test_guess_t_f_gradient_matches_fd(cfg, prob):
    rng = np.random.default_rng(11)
    seed = rng.standard_normal(prob.n_ref)
    h = 1e-5

    def value(t_f):
        z_ref, _ = prob.initial_reference(t_f)
        return float(seed @ z_ref)

    _, guess = prob.initial_reference(33.0)
    grad = guess.t_f_gradient(seed)
    fd = (value(33.0 + h) - value(33.0 - h)) / (2 * h)
    assert grad == pytest.approx(fd, rel=1e-5, abs=1e-8)


# -- converged-run invariants ------------------------------------------------


def test_converged_run_33(run33):
    assert run33.status == "converged"
    assert run33.iterations <= 8
    assert 31600.0 < -run33.loss < 31800.0
    assert run33.tight_status == "optimal"
    assert run33.z_tight is not None


def test_virtual_control_floor(run33):
    # converged virtual control sits at the penalty floor, far below any
    # physically meaningful defect
    assert run33.max_gamma < 1e-4


def test_thrust_and_cone_invariants(cfg, prob, run33):
    X, U = split_reference(run33.z_tight[: prob.n_ref], cfg.N)
    u = U * cfg.u_scale
    unorm = np.linalg.norm(u, axis=0)
    tol = 1e-6 * cfg.u_scale
    assert np.all(unorm >= cfg.u_min - tol)
    assert np.all(unorm <= cfg.u_max + tol)
    # pointing cone
    lat = np.linalg.norm(u[1:], axis=0)
    assert np.all(lat <= cfg.tan_eta * u[0] + tol)
    # glideslope at the non-terminal nodes
    r = X[:3, :-1] * cfg.r_scale
    assert np.all(np.linalg.norm(r[1:], axis=0) <= cfg.tan_beta * r[0] + 1e-6)
    # boundary conditions in physical units
    np.testing.assert_allclose(X[:3, 0] * cfg.r_scale, cfg.r0, atol=1e-6)
    np.testing.assert_allclose(X[:3, -1] * cfg.r_scale, 0.0, atol=1e-6)
    np.testing.assert_allclose(X[3:6, -1] * cfg.v_scale, 0.0, atol=1e-6)
    # mass strictly decreasing
    assert np.all(np.diff(X[6]) < 0.0)


def test_infeasible_band_reported_in_band(cfg, prob):
    res = run_pdg(cfg, 32.0, None, prob)
    assert res.status == "solver_failure"
    assert not res.converged
    assert res.tight_status == "primal_infeasible"
    ok = run_pdg(cfg, 32.3, None, prob)
    assert ok.converged and ok.tight_status == "optimal"


def test_pipeline_gradient_matches_fd(cfg, prob):
    t_f, h = 33.5, 1e-3
    res = run_pdg(cfg, t_f, None, prob)
    grad = pdg_loss_gradient(cfg, res, None, prob)
    lp = run_pdg(cfg, t_f + h, None, prob)
    lm = run_pdg(cfg, t_f - h, None, prob)
    fd = (lp.loss - lm.loss) / (2 * h)
    assert grad == pytest.approx(fd, rel=3e-2)


def test_sweep_records_failures_and_gradients(cfg):
    rows = terminal_time_sweep(cfg, [32.0, 33.0])
    assert rows[0]["status"] == "solver_failure"
    assert not rows[0]["converged"]
    assert rows[1]["converged"]
    assert np.isfinite(rows[1]["grad_t_f"])
    assert rows[1]["final_mass"] > 31000.0


# -- physical replay and exports ---------------------------------------------


def test_rk4_replay_certified_trajectory(cfg, prob, run33):
    rep = rk4_verify(cfg, run33.z_tight, 33.0, problem=prob)
    assert rep["terminal_position_defect_m"] < 1.5
    assert rep["terminal_velocity_defect_mps"] < 0.1
    assert rep["position_defect_m"][0] < 1e-9  # replay starts on the state


def test_rk4_detects_corruption(cfg, prob, run33):
    z = run33.z_tight.copy()
    z[prob.x_cols(cfg.N)[0]] += 10.0 / cfg.r_scale  # 10 m terminal shift
    rep = rk4_verify(cfg, z, 33.0, problem=prob)
    assert rep["terminal_position_defect_m"] > 8.0


def test_trajectory_table(cfg, run33):
    header, data = trajectory_table(cfg, run33.z_tight, 33.0)
    assert len(header) == data.shape[1]
    assert data[0, 0] == 0.0 and data[-1, 0] == pytest.approx(33.0)
    m_col = header.index("m")
    assert np.all(np.diff(data[:, m_col]) < 0.0)
    u_col = header.index("u_norm")
    assert data[:, u_col].min() > 0.9 * cfg.u_min


def test_config_roundtrip(tmp_path, cfg):
    path = tmp_path / "pdg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = PdgConfig.from_json(path)
    assert back == cfg
