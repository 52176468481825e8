"""
Hypersonic gliding entry as a differentiable SCP problem.

Eight-state rotating-Earth entry dynamics (radial distance, longitude,
latitude, speed, flight-path angle, heading, angle of attack, bank angle)
with the two angle rates as controls, an exponential atmosphere with a
polynomial lift/drag model, and linearized dynamic-pressure, heat-rate, and
normal-load path constraints.  The transcription keeps the interval
duration as the first optimization variable (free final time), evaluates
the trapezoidal dynamics at interval midpoints, and puts trust-region
penalties on steps in the flight-path angle, the control rates, and the
interval duration.

Two scalar parameter families are differentiated end to end: the
trust-region penalty weights (process parameters, entering the subproblem
only through Q and c) and a surface-to-mass scaling factor (a vehicle
design parameter, entering through the aero terms of every linearization
and through the integrated initial reference trajectory).

Variables are scaled: radial distance by 1e5 m, speed by 1e4 m/s, time by
10 s (which makes the position-rate rows coefficient-free); angles are in
radians and control rates are radians per scaled time unit.

The subproblem keeps the running cost as its exact convex quadratic in the
flight-path angle and the control rates (the duration coupling is
linearized).  This is load-bearing: replacing the quadratic by its
linearization leaves the cost curvature invisible to the subproblem, so
every step is limited by the trust penalty alone.  Small control-rate
weights then ride a sawtooth null mode of the trapezoidal node averaging
into divergence, and large weights crawl for dozens of iterations.  With
the curvature in the objective the steps are damped-Newton-like: the
studied weight settings reproduce their expected convergence speeds, and
the trust weights control damping rather than step existence.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import sympy as sym

from .engine import HookGradients, ParamSet, ScpConfig, scp_backward, scp_forward
from .socp import ConicProgram
from .sensitivity import extract_coefficient_gradients
from .symdyn import DynamicsModel, rk4_trajectory, rk4_trajectory_with_param_tangent


class SingularStateError(ValueError):
    """Reference trajectory left the region where the model is smooth."""


HX = 8   # states per node
HU = 2   # controls per node
HNW = HX + HU

# state component order
_IR, _ICHI, _IPHI, _IV, _IGAM, _IPSI, _IALP, _ISIG = range(HX)

# the four labeled trust-weight settings, (log10 w_gamma, log10 w_u)
TRUST_CASES = {
    "case1": (1.429, 1.536),
    "case2": (1.333, 0.388),
    "case3": (1.344, -0.199),
    "case4": (1.346, -0.635),
}


@dataclass
class HgvConfig:
    """Entry scenario: aero model, vehicle constants, bounds, grid, scales."""

    # lift/drag polynomials in angle of attack (rad) and Mach number
    C_L11: float = 2.497
    C_L21: float = 1.477
    C_L22: float = -0.03731
    C_D01: float = 0.2298
    C_D11: float = -0.02432
    C_D21: float = 2.36
    C_D22: float = 0.0007079

    mass: float = 907.186          # vehicle mass [kg]
    S_ref: float = 0.48            # aerodynamic reference area [m^2]
    rho0: float = 1.225            # sea-level density [kg/m^3]
    h_s: float = 7200.0            # density scale height [m]
    earth_radius: float = 6371.0e3  # altitude datum [m]
    mu_earth: float = 3.986004418e14  # gravitational parameter [m^3/s^2]
    omega_E: float = 7.2921159e-5  # planet rotation rate [rad/s]
    sound_speed: float = 340.0     # constant speed of sound for Mach [m/s]
    g0: float = 9.80655            # load-factor normalization [m/s^2]
    k_q: float = 9.437e-5          # heat-rate constant

    p_max: float = 1.1e5           # dynamic pressure bound [N/m^2]
    q_max: float = 2.5e6           # heat rate bound [W/m^2]
    n_max: float = 2.0             # normal load bound [g]

    r0: float = 6449.1e3           # initial radial distance [m]
    chi0_deg: float = 0.0
    phi0_deg: float = 0.0
    V0: float = 6700.0             # initial speed [m/s]
    gamma0_deg: float = 0.0
    psi0_deg: float = 90.0
    alpha0_deg: float = 30.0
    sigma0_deg: float = 0.0

    r_f: float = 6401.1e3          # terminal radial distance [m]
    chi_f_deg: float = 120.0
    phi_f_deg: float = 12.0
    gamma_f_deg: float = 0.0
    psi_f_deg: float = 90.0
    V_f_min: float = 1000.0        # terminal speed floor [m/s]

    alpha_min_deg: float = 0.0
    alpha_max_deg: float = 40.0
    sigma_max_deg: float = 60.0    # symmetric bank bound
    rate_max_deg: float = 5.0      # symmetric angle-rate bound [deg/s]
    t_f_min: float = 1800.0        # total flight time bounds [s]
    t_f_max: float = 3000.0
    t_f0: float = 2500.0           # initial-reference flight time [s]

    N: int = 100                   # trapezoidal intervals
    r_scale: float = 1.0e5
    v_scale: float = 1.0e4
    t_scale: float = 10.0
    m_scale: float = 1.0           # mass normalization (mass is constant here)

    C1: float = 1.0                # flight-path-angle cost weight
    C2: float = 1.1                # control-rate cost weight

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def scaled_entry_state(cfg):
    """Initial state in scaled units."""
    d = np.radians
    return np.array([
        cfg.r0 / cfg.r_scale,
        d(cfg.chi0_deg),
        d(cfg.phi0_deg),
        cfg.V0 / cfg.v_scale,
        d(cfg.gamma0_deg),
        d(cfg.psi0_deg),
        d(cfg.alpha0_deg),
        d(cfg.sigma0_deg),
    ])


def aero_forces(cfg, alpha, Ma, r, V, w_sm=1.0):
    """Lift and drag [N] and density [kg/m^3] at physical (alpha, Ma, r, V).

    The surface-to-mass scaling multiplies the reference area, leaving the
    aerodynamic coefficients untouched.
    """
    rho = cfg.rho0 * np.exp(-(r - cfg.earth_radius) / cfg.h_s)
    C_L = cfg.C_L11 * alpha + cfg.C_L21 * alpha**2 + cfg.C_L22 * alpha * Ma
    C_D = cfg.C_D01 + cfg.C_D11 * Ma + cfg.C_D21 * alpha**2 + cfg.C_D22 * Ma**2
    qdyn = 0.5 * rho * V**2
    S = cfg.S_ref * w_sm
    return qdyn * S * C_L, qdyn * S * C_D, rho


def _density_exponential(cfg, r):
    """exp(-(h / h_s)) over the scaled radial coordinate, overflow-safe.

    With float constants sympy splits exp(a - b*r) into exp(a) * exp(-b*r)
    whose pieces overflow and underflow float64 around typical entry
    radii even though their product is tame.  Exact rational constants
    suppress that split, so the compiled code evaluates the well-scaled
    argument first and exponentiates once.
    """
    datum = sym.Rational(cfg.earth_radius)
    scale = sym.Rational(cfg.h_s)
    rr = sym.Rational(cfg.r_scale)
    return sym.exp((datum - r * rr) / scale)


def _scaled_entry_model(cfg):
    """Entry dynamics over scaled variables and scaled time.

    The surface-to-mass scaling enters linearly through the aerodynamic
    accelerations and is exposed as a named parameter so the reverse pass
    can pull coefficient gradients back to it symbolically.
    """
    r, chi, phi, V, gam, psi, alp, sig = sym.symbols(
        "r chi phi V gam psi alp sig"
    )
    u1, u2 = sym.symbols("u1 u2")
    w = sym.Symbol("w_sm")

    R = r * cfg.r_scale
    VV = V * cfg.v_scale
    rho = cfg.rho0 * _density_exponential(cfg, r)
    Ma = VV / cfg.sound_speed
    C_L = cfg.C_L11 * alp + cfg.C_L21 * alp**2 + cfg.C_L22 * alp * Ma
    C_D = cfg.C_D01 + cfg.C_D11 * Ma + cfg.C_D21 * alp**2 + cfg.C_D22 * Ma**2
    sm = w * cfg.S_ref / cfg.mass
    L_acc = rho * VV**2 * sm * C_L / 2      # lift acceleration [m/s^2]
    D_acc = rho * VV**2 * sm * C_D / 2
    g = cfg.mu_earth / R**2
    wE = cfg.omega_E
    ts = cfg.t_scale
    kv = ts / cfg.v_scale
    kr = ts * cfg.v_scale / cfg.r_scale

    f = [
        kr * V * sym.sin(gam),
        kr * V * sym.cos(gam) * sym.sin(psi) / (r * sym.cos(phi)),
        kr * V * sym.cos(gam) * sym.cos(psi) / r,
        kv * (
            -D_acc - g * sym.sin(gam)
            + R * wE**2 * sym.cos(phi)
            * (sym.cos(phi) * sym.sin(gam)
               - sym.sin(phi) * sym.cos(gam) * sym.cos(psi))
        ),
        ts * (
            L_acc * sym.cos(sig) / VV
            - g * sym.cos(gam) / VV
            + R * wE**2 * sym.cos(phi) / VV
            * (sym.cos(phi) * sym.cos(gam)
               + sym.sin(phi) * sym.sin(gam) * sym.cos(psi))
            + VV * sym.cos(gam) / R
            + 2 * wE * sym.cos(phi) * sym.sin(psi)
        ),
        ts * (
            L_acc * sym.sin(sig) / (VV * sym.cos(gam))
            + R * wE**2 * sym.cos(phi) * sym.sin(phi) * sym.sin(psi)
            / (VV * sym.cos(gam))
            + VV * sym.sin(psi) * sym.tan(phi) * sym.cos(gam) / R
            + 2 * wE * (sym.sin(phi)
                        - sym.cos(phi) * sym.tan(gam) * sym.cos(psi))
        ),
        u1,
        u2,
    ]
    return DynamicsModel(
        [r, chi, phi, V, gam, psi, alp, sig], [u1, u2], f,
        param_syms={"w_sm": w},
    )


def _path_constraint_model(cfg):
    """Dynamic pressure, heat rate, and normal load over (r, V, alpha).

    Inputs are the scaled radial distance, scaled speed, and angle of attack;
    each output is normalized by its bound so the constraint reads <= 1 and
    the linearized rows are well scaled.  Reusing the dynamics-model compiler
    provides values, Jacobians, second derivatives, and the surface-to-mass
    parameter derivative from one symbolic definition.
    """
    r, V, alp = sym.symbols("r V alp")
    w = sym.Symbol("w_sm")
    VV = V * cfg.v_scale
    rho = cfg.rho0 * _density_exponential(cfg, r)
    Ma = VV / cfg.sound_speed
    C_L = cfg.C_L11 * alp + cfg.C_L21 * alp**2 + cfg.C_L22 * alp * Ma
    C_D = cfg.C_D01 + cfg.C_D11 * Ma + cfg.C_D21 * alp**2 + cfg.C_D22 * Ma**2
    sm = w * cfg.S_ref / cfg.mass
    L_acc = rho * VV**2 * sm * C_L / 2
    D_acc = rho * VV**2 * sm * C_D / 2
    exprs = [
        (rho * VV**2 / 2) / cfg.p_max,
        (cfg.k_q * sym.sqrt(rho) * VV**3.15) / cfg.q_max,
        (sym.sqrt(L_acc**2 + D_acc**2) / cfg.g0) / cfg.n_max,
    ]
    return DynamicsModel([r, V, alp], [], exprs, param_syms={"w_sm": w})


def split_nodes(z, N):
    """(states (8, N+1), controls (2, N+1)) view of the node part of z."""
    nodes = z[1:].reshape(N + 1, HNW).T
    return nodes[:HX], nodes[HX:]


def pack_nodes(T, X, U):
    return np.concatenate([[T], np.vstack([X, U]).T.ravel()])


class HgvProblem:
    """Entry trajectory planning in the differentiable-SCP protocol.

    Subproblem variables: z = [T, (x[0], u[0]), ..., (x[N], u[N])] where T
    is the scaled interval duration.  The reference layout equals the
    variable layout, so reference updates and seed lifting are identity
    maps.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.model = _scaled_entry_model(cfg)
        self.path = _path_constraint_model(cfg)
        self.n_vars = 1 + (cfg.N + 1) * HNW
        self.n_ref = self.n_vars

    # -- variable layout -------------------------------------------------

    def x_cols(self, m):
        base = 1 + HNW * m
        return np.arange(base, base + HX)

    def u_cols(self, m):
        base = 1 + HNW * m + HX
        return np.arange(base, base + HU)

    def gamma_cols(self):
        return 1 + HNW * np.arange(self.cfg.N + 1) + _IGAM

    def control_cols(self):
        base = 1 + HNW * np.arange(self.cfg.N + 1)[:, None] + HX
        return (base + np.arange(HU)).ravel()

    def path_cols(self, m):
        """Columns of the path-constraint inputs (r, V, alpha) at node m."""
        base = 1 + HNW * m
        return np.array([base + _IR, base + _IV, base + _IALP])

    # -- initial reference -------------------------------------------------

    def _profile_controls(self):
        """Scaled node controls of the fixed startup profile.

        A constant angle-of-attack ramp toward 20 deg plus a one-period
        cosine bank-rate wave with a constant negative offset, both slow
        enough to sit far inside the rate bounds.
        """
        cfg = self.cfg
        t = np.linspace(0.0, cfg.t_f0, cfg.N + 1)
        alpha0 = np.radians(cfg.alpha0_deg)
        sigma_max = np.radians(cfg.sigma_max_deg)
        u1 = np.full(cfg.N + 1, (np.pi / 9 - alpha0) / cfg.t_f0)
        u2 = (
            -(2 * np.pi / 3) * (sigma_max / cfg.t_f0)
            * np.cos(2 * np.pi * t / cfg.t_f0)
            - sigma_max / (6 * cfg.t_f0)
        )
        return np.vstack([u1, u2]) * cfg.t_scale

    def initial_reference(self, w_sm=1.0, substeps=4, tangent=False):
        """Integrate the startup control profile into a node trajectory.

        Returns the packed reference, or (reference, d reference / d w_sm)
        when tangent is requested; controls and the interval duration carry
        no surface-to-mass dependence, so their tangent entries are zero.
        """
        cfg = self.cfg
        U = self._profile_controls()
        x0 = scaled_entry_state(cfg)
        dt = cfg.t_f0 / (cfg.t_scale * cfg.N)
        T_ref = dt
        params = {"w_sm": float(w_sm)}
        if not tangent:
            X = rk4_trajectory(self.model, x0, U, dt, params, substeps=substeps)
            return pack_nodes(T_ref, X, U)
        X, dX = rk4_trajectory_with_param_tangent(
            self.model, x0, U, dt, "w_sm", params, substeps=substeps
        )
        return pack_nodes(T_ref, X, U), pack_nodes(0.0, dX, np.zeros_like(U))

    # -- engine protocol ---------------------------------------------------

    def params_for(self, w_gamma, w_u, w_sm, z_ref):
        return ParamSet(
            z_ref=z_ref,
            theta_scp={"w_gamma": float(w_gamma), "w_u": float(w_u)},
            theta_tp={"w_sm": float(w_sm)},
        )

    def _check_reference(self, X):
        cfg = self.cfg
        if np.any(X[_IR] * cfg.r_scale <= cfg.earth_radius - 100e3):
            raise SingularStateError("reference descended below the datum")
        if np.any(X[_IV] <= 0.0):
            raise SingularStateError("reference speed is not positive")
        if np.any(np.abs(np.cos(X[_IPHI])) < 1e-6) or np.any(
            np.abs(np.cos(X[_IGAM])) < 1e-6
        ):
            raise SingularStateError("polar or vertical-flight singularity")

    def build_subproblem(self, params):
        cfg = self.cfg
        N = cfg.N
        n = self.n_vars
        w_sm = params.theta_tp["w_sm"]
        w_gamma = params.theta_scp["w_gamma"]
        w_u = params.theta_scp["w_u"]
        pvals = {"w_sm": w_sm}

        T_ref = params.z_ref[0]
        X_ref, U_ref = split_nodes(params.z_ref, N)
        self._check_reference(X_ref)
        Xm = 0.5 * (X_ref[:, :-1] + X_ref[:, 1:])   # interval midpoints
        Um = 0.5 * (U_ref[:, :-1] + U_ref[:, 1:])
        fm = self.model.f(Xm, Um, pvals)            # (8, N)
        Jm = self.model.jacobian(Xm, Um, pvals)     # (8, 10, N)

        # equality block: N*8 midpoint dynamics rows, 8 initial pins, then
        # terminal pins on (r, chi, phi, gamma, psi)
        p = HX * N + HX + 5
        A = sp.lil_matrix((p, n))
        b = np.zeros(p)
        eye = np.eye(HX)
        for nint in range(N):
            rows = slice(HX * nint, HX * (nint + 1))
            Jx = Jm[:, :HX, nint]
            Ju = Jm[:, HX:, nint]
            wbar = np.concatenate([Xm[:, nint], Um[:, nint]])
            A[rows, self.x_cols(nint)] = -(eye + 0.5 * T_ref * Jx)
            A[rows, self.x_cols(nint + 1)] = eye - 0.5 * T_ref * Jx
            A[rows, self.u_cols(nint)] = -0.5 * T_ref * Ju
            A[rows, self.u_cols(nint + 1)] = -0.5 * T_ref * Ju
            A[rows, 0] = -fm[:, nint]
            b[HX * nint : HX * (nint + 1)] = -T_ref * (
                Jm[:, :, nint] @ wbar
            )
        r0 = HX * N
        A[r0 : r0 + HX, self.x_cols(0)] = eye
        b[r0 : r0 + HX] = scaled_entry_state(cfg)
        d = np.radians
        terminal = [
            (_IR, cfg.r_f / cfg.r_scale),
            (_ICHI, d(cfg.chi_f_deg)),
            (_IPHI, d(cfg.phi_f_deg)),
            (_IGAM, d(cfg.gamma_f_deg)),
            (_IPSI, d(cfg.psi_f_deg)),
        ]
        for j, (comp, val) in enumerate(terminal):
            A[r0 + HX + j, self.x_cols(N)[comp]] = 1.0
            b[r0 + HX + j] = val

        # inequalities: per-node linearized path rows, then constant boxes
        pv = self.path.f(X_ref[[_IR, _IV, _IALP]], np.zeros((0, N + 1)), pvals)
        pj = self.path.jacobian(
            X_ref[[_IR, _IV, _IALP]], np.zeros((0, N + 1)), pvals
        )
        q = 3 * (N + 1) + 8 * (N + 1) + 3
        G = sp.lil_matrix((q, n))
        h = np.zeros(q)
        for m in range(N + 1):
            y = X_ref[[_IR, _IV, _IALP], m]
            cols = self.path_cols(m)
            for i in range(3):
                row = 3 * m + i
                G[row, cols] = pj[i, :, m]
                h[row] = 1.0 - pv[i, m] + pj[i, :, m] @ y
        box0 = 3 * (N + 1)
        alpha_lim = (d(cfg.alpha_min_deg), d(cfg.alpha_max_deg))
        sigma_lim = d(cfg.sigma_max_deg)
        rate_lim = d(cfg.rate_max_deg) * cfg.t_scale
        for m in range(N + 1):
            acol = self.path_cols(m)[2]
            scol = 1 + HNW * m + _ISIG
            u1c, u2c = self.u_cols(m)
            rows = box0 + 8 * m
            G[rows + 0, acol] = 1.0
            h[rows + 0] = alpha_lim[1]
            G[rows + 1, acol] = -1.0
            h[rows + 1] = -alpha_lim[0]
            G[rows + 2, scol] = 1.0
            h[rows + 2] = sigma_lim
            G[rows + 3, scol] = -1.0
            h[rows + 3] = sigma_lim
            G[rows + 4, u1c] = 1.0
            h[rows + 4] = rate_lim
            G[rows + 5, u1c] = -1.0
            h[rows + 5] = rate_lim
            G[rows + 6, u2c] = 1.0
            h[rows + 6] = rate_lim
            G[rows + 7, u2c] = -1.0
            h[rows + 7] = rate_lim
        tail = box0 + 8 * (N + 1)
        G[tail, self.x_cols(N)[_IV]] = -1.0      # terminal speed floor
        h[tail] = -cfg.V_f_min / cfg.v_scale
        G[tail + 1, 0] = 1.0                     # interval duration box
        h[tail + 1] = cfg.t_f_max / (N * cfg.t_scale)
        G[tail + 2, 0] = -1.0
        h[tail + 2] = -cfg.t_f_min / (N * cfg.t_scale)

        # objective: running cost kept quadratic in the flight-path angle
        # and the control rates at the reference duration, duration
        # coupling linearized, plus trust penalties on those entries and
        # the interval duration
        _, theta_sum = self._j1_coefficients(params)
        pen = np.zeros(n)
        pen[0] = w_gamma
        pen[self.gamma_cols()] = w_gamma
        pen[self.control_cols()] = w_u
        cq = np.zeros(n)
        cq[self.gamma_cols()] = cfg.C1 * T_ref
        cq[self.control_cols()] = cfg.C2 * T_ref
        Q = sp.diags(2.0 * (pen + cq), format="csc")
        c = -2.0 * pen * params.z_ref
        c[0] += theta_sum

        program = ConicProgram(
            Q=Q, c=c, A=A.tocsc(), b0=b, G0=G.tocsc(), h0=h, cones=[]
        )
        hooks = HgvHooks(
            problem=self,
            params=params,
            fm=fm,
            Jm=Jm,
            Xm=Xm,
            Um=Um,
            path_vals=pv,
            path_jacs=pj,
            pen=pen,
        )
        return program, hooks

    def reference_update(self, params, z_star):
        return z_star.copy()

    def lift_ref_seed(self, params, g_ref):
        return g_ref.copy()

    def _j1_coefficients(self, params):
        """Gradient of the linearized running cost and the node cost sum.

        The running cost integrand C1 gamma^2 + C2 (u1^2 + u2^2) is summed
        over all nodes and multiplied by the interval duration; its
        linearization in (gamma, u, T) around the reference gives the
        subproblem's linear objective.
        """
        cfg = self.cfg
        N = cfg.N
        T_ref = params.z_ref[0]
        X_ref, U_ref = split_nodes(params.z_ref, N)
        gam = X_ref[_IGAM]
        theta = cfg.C1 * gam**2 + cfg.C2 * np.sum(U_ref**2, axis=0)
        theta_sum = float(theta.sum())
        dJ = np.zeros(self.n_vars)
        dJ[0] = theta_sum
        dJ[self.gamma_cols()] = 2.0 * cfg.C1 * T_ref * gam
        dJ[self.control_cols()] = (2.0 * cfg.C2 * T_ref * U_ref).T.ravel()
        return dJ, theta_sum

    def j1_value(self, params, z_star):
        """Linearized running cost at a subproblem solution."""
        dJ, theta_sum = self._j1_coefficients(params)
        T_ref = params.z_ref[0]
        return float(T_ref * theta_sum + dJ @ (z_star - params.z_ref))

    def j1_seed_solution(self, params):
        """d j1 / d z_star."""
        dJ, _ = self._j1_coefficients(params)
        return dJ

    def j1_seed_reference(self, params, z_star):
        """d j1 / d z_ref at fixed z_star.

        At a converged fixed point the step z_star - z_ref vanishes and so
        does this gradient; away from convergence it carries the reference
        dependence of every linearization coefficient of the running cost.
        """
        cfg = self.cfg
        N = cfg.N
        T_ref = params.z_ref[0]
        X_ref, U_ref = split_nodes(params.z_ref, N)
        X_s, U_s = split_nodes(z_star, N)
        dT = z_star[0] - T_ref
        dgam = X_s[_IGAM] - X_ref[_IGAM]
        dU = U_s - U_ref
        out = np.zeros(self.n_vars)
        out[0] = float(
            2.0 * cfg.C1 * X_ref[_IGAM] @ dgam
            + 2.0 * cfg.C2 * np.sum(U_ref * dU)
        )
        out[self.gamma_cols()] = 2.0 * cfg.C1 * (
            T_ref * dgam + dT * X_ref[_IGAM]
        )
        out[self.control_cols()] = (
            2.0 * cfg.C2 * (T_ref * dU + dT * U_ref)
        ).T.ravel()
        return out

    def j2_values(self, params, program, z_star):
        """Subproblem objective at z* and at the reference point.

        The stored quadratic form drops the constants of both the duration
        coupling and the centered trust penalty; they are added back so the
        convergence test compares true objective values.  At the reference
        the step is zero and the objective reduces to the running cost of
        the reference trajectory itself.
        """
        _, theta_sum = self._j1_coefficients(params)
        T_ref = params.z_ref[0]
        J_ref = T_ref * theta_sum
        pen = np.zeros(self.n_vars)
        pen[0] = params.theta_scp["w_gamma"]
        pen[self.gamma_cols()] = params.theta_scp["w_gamma"]
        pen[self.control_cols()] = params.theta_scp["w_u"]
        const = float(pen @ params.z_ref**2) - J_ref
        return program.objective_value(z_star) + const, float(J_ref)


class HgvHooks:
    """Reverse-mode pull-back of one entry subproblem's coefficients.

    Every coefficient depends on the reference through the midpoint
    linearizations (dynamics rows), the node linearizations (path rows),
    and the running-cost expansion; the duration-scaled blocks also depend
    on the reference interval duration, which is itself a reference entry.
    The trust weights touch only Q and the centering part of c, and the
    surface-to-mass factor is pulled back through the parameter
    derivatives of the symbolic dynamics and path models.
    """

    def __init__(self, problem, params, fm, Jm, Xm, Um, path_vals, path_jacs,
                 pen):
        self.problem = problem
        self.params = params
        self.fm = fm
        self.Jm = Jm
        self.Xm = Xm
        self.Um = Um
        self.path_vals = path_vals
        self.path_jacs = path_jacs
        self.pen = pen

    def vjp(self, record, adjoint):
        prob = self.problem
        cfg = prob.cfg
        N = cfg.N
        params = self.params
        T_ref = params.z_ref[0]
        X_ref, U_ref = split_nodes(params.z_ref, N)
        pvals = {"w_sm": params.theta_tp["w_sm"]}
        grads = extract_coefficient_gradients(record, adjoint)
        dA, db = grads.dA, grads.db0

        d_z_ref = np.zeros(prob.n_vars)
        d_T = 0.0
        d_wsm = 0.0

        # dynamics rows: collect the adjoint weight on each midpoint's
        # Jacobian and field value, then contract with the second
        # derivatives to reach the midpoint states and from there the nodes
        Wj = np.zeros((HX, HNW, N))     # weight on Jm[:, :, nint]
        Wf = np.zeros((HX, N))          # weight on fm[:, nint]
        for nint in range(N):
            rows = slice(HX * nint, HX * (nint + 1))
            db_r = db[rows]
            wbar = np.concatenate([self.Xm[:, nint], self.Um[:, nint]])
            blk = (
                dA[rows][:, prob.x_cols(nint)]
                + dA[rows][:, prob.x_cols(nint + 1)]
            )
            blku = (
                dA[rows][:, prob.u_cols(nint)]
                + dA[rows][:, prob.u_cols(nint + 1)]
            )
            dJw = np.hstack([blk, blku]) * (-0.5 * T_ref)
            dJw += -T_ref * np.outer(db_r, wbar)
            Wj[:, :, nint] = dJw
            Wf[:, nint] = -dA[rows][:, 0]
            # direct duration dependence of the same blocks
            d_T += float(
                -0.5 * np.sum(np.hstack([blk, blku]) * self.Jm[:, :, nint])
            )
            d_T += float(db_r @ (-(self.Jm[:, :, nint] @ wbar)))
            # direct midpoint dependence of b through the Jacobian product
            dwbar_direct = -T_ref * (self.Jm[:, :, nint].T @ db_r)
            d_z_ref[np.concatenate([prob.x_cols(nint), prob.u_cols(nint)])] += (
                0.5 * dwbar_direct
            )
            d_z_ref[
                np.concatenate([prob.x_cols(nint + 1), prob.u_cols(nint + 1)])
            ] += 0.5 * dwbar_direct

        hess = prob.model.hessian(self.Xm, self.Um, pvals)  # (8, 10, 10, N)
        dwbar = np.einsum("ijm,ijkm->km", Wj, hess)
        dwbar += np.einsum("im,ijm->jm", Wf, self.Jm)
        for nint in range(N):
            cols0 = np.concatenate([prob.x_cols(nint), prob.u_cols(nint)])
            cols1 = np.concatenate(
                [prob.x_cols(nint + 1), prob.u_cols(nint + 1)]
            )
            d_z_ref[cols0] += 0.5 * dwbar[:, nint]
            d_z_ref[cols1] += 0.5 * dwbar[:, nint]
        d_wsm += float(
            np.sum(Wj * prob.model.d_param_jacobian("w_sm", self.Xm, self.Um,
                                                    pvals))
        )
        d_wsm += float(
            np.sum(Wf * prob.model.d_param("w_sm", self.Xm, self.Um, pvals))
        )

        # path rows: node linearizations of the normalized constraints
        dG0, dh0 = grads.dG0, grads.dh0
        Y = X_ref[[_IR, _IV, _IALP]]
        U_empty = np.zeros((0, N + 1))
        ph = prob.path.hessian(Y, U_empty, pvals)       # (3, 3, 3, N+1)
        pdw = prob.path.d_param("w_sm", Y, U_empty, pvals)
        pjdw = prob.path.d_param_jacobian("w_sm", Y, U_empty, pvals)
        for m in range(N + 1):
            cols = prob.path_cols(m)
            y = Y[:, m]
            for i in range(3):
                row = 3 * m + i
                dg = dG0[row, cols]
                dhr = dh0[row]
                if not dg.any() and dhr == 0.0:
                    continue
                H = ph[i, :, :, m]
                d_z_ref[cols] += H @ dg + dhr * (H @ y)
                d_wsm += float(dg @ pjdw[i, :, m]) + dhr * float(
                    -pdw[i, m] + pjdw[i, :, m] @ y
                )

        # objective: trust centering in c, running-cost curvature in Q
        dc = grads.dc
        gcols = prob.gamma_cols()
        ucols = prob.control_cols()
        gam = X_ref[_IGAM]
        uref = U_ref.T.ravel()
        d_z_ref[gcols] += dc[gcols] * (-2.0 * self.pen[gcols])
        d_z_ref[ucols] += dc[ucols] * (-2.0 * self.pen[ucols])
        # duration column of c: node cost sum and its own trust centering
        d_z_ref[gcols] += dc[0] * 2.0 * cfg.C1 * gam
        d_z_ref[ucols] += dc[0] * 2.0 * cfg.C2 * uref
        d_T += dc[0] * (-2.0 * self.pen[0])

        dQd = grads.dQ.diagonal()
        d_T += float(2.0 * cfg.C1 * dQd[gcols].sum())
        d_T += float(2.0 * cfg.C2 * dQd[ucols].sum())
        d_wgamma = 2.0 * float(dQd[0] + dQd[gcols].sum())
        d_wu = 2.0 * float(dQd[ucols].sum())
        d_wgamma += float(-2.0 * dc[0] * T_ref)
        d_wgamma += float(dc[gcols] @ (-2.0 * gam))
        d_wu += float(dc[ucols] @ (-2.0 * uref))

        d_z_ref[0] += d_T
        return HookGradients(
            d_z_ref=d_z_ref,
            d_theta_scp={"w_gamma": d_wgamma, "w_u": d_wu},
            d_theta_tp={"w_sm": d_wsm},
        )


# -- losses and gradients ------------------------------------------------


@dataclass
class HgvRunResult:
    """One SCP solve of the entry problem plus its differentiation inputs."""

    w_gamma: float
    w_u: float
    w_sm: float
    tape: object
    z_ref1: np.ndarray
    d_zref1_d_wsm: np.ndarray
    j1_history: list
    converged: bool
    status: str
    iterations: int
    t_f: float  # total flight time [s], NaN when no iteration completed

    @property
    def z_star(self):
        return self.tape.final_solution


def run_hgv(cfg, w_gamma, w_u, w_sm=1.0, scp_config=None, problem=None):
    """Forward entry solve under given trust weights and vehicle scaling.

    Solver failures and iteration-limit stops are reported in-band through
    the result's status; the recorded iterations stay differentiable.
    """
    if problem is None:
        problem = HgvProblem(cfg)
    if scp_config is None:
        scp_config = ScpConfig()
    z_ref1, dz1 = problem.initial_reference(w_sm, tangent=True)
    params = problem.params_for(w_gamma, w_u, w_sm, z_ref1)
    tape = scp_forward(problem, params, scp_config)
    j1 = [
        problem.j1_value(rec.params, rec.solution.z)
        for rec in tape.iterations
    ]
    t_f = np.nan
    if tape.iterations:
        t_f = float(tape.final_solution[0]) * cfg.N * cfg.t_scale
    return HgvRunResult(
        w_gamma=w_gamma,
        w_u=w_u,
        w_sm=w_sm,
        tape=tape,
        z_ref1=z_ref1,
        d_zref1_d_wsm=dz1,
        j1_history=j1,
        converged=tape.converged,
        status=tape.status,
        iterations=tape.n_iterations,
        t_f=t_f,
    )


def convergence_loss(result):
    """Sum of gaps between each iteration's cost and the final cost.

    Zero for a single-iteration run; small when the cost history settles
    quickly onto its final value.
    """
    j1 = result.j1_history
    if len(j1) <= 1:
        return 0.0
    jK = j1[-1]
    return float(sum(abs(v - jK) for v in j1[1:]))


def terminal_cost_loss(result):
    """Final iteration's linearized running cost."""
    return float(result.j1_history[-1])


def _loss_seeds(problem, result, kind):
    """Explicit per-iteration solution seeds for the chosen loss."""
    tape = result.tape
    K = tape.n_iterations
    j1 = result.j1_history
    coef = np.zeros(K)
    if kind == "convergence":
        jK = j1[-1]
        for i in range(1, K - 1):
            coef[i] = np.sign(j1[i] - jK)
        coef[K - 1] = -coef[1 : K - 1].sum()
    elif kind == "terminal":
        coef[K - 1] = 1.0
    else:
        raise ValueError(f"unknown loss kind {kind!r}")

    seeds = [None] * K
    for i in range(K):
        s = None
        if coef[i] != 0.0:
            s = coef[i] * problem.j1_seed_solution(tape.iterations[i].params)
        if i + 1 < K and coef[i + 1] != 0.0:
            rec = tape.iterations[i + 1]
            extra = coef[i + 1] * problem.j1_seed_reference(
                rec.params, rec.solution.z
            )
            s = extra if s is None else s + extra
        seeds[i] = s
    if seeds[-1] is None:
        seeds[-1] = np.zeros(problem.n_vars)
    return seeds


def hgv_loss_gradient(cfg, result, kind, scp_config=None, problem=None):
    """Gradient of the chosen loss for all differentiated parameters.

    Returns a dict with the trust-weight gradients and the total
    surface-to-mass gradient, the latter combining the subproblem
    coefficient pull-backs with the chain through the integrated initial
    reference.
    """
    if problem is None:
        problem = HgvProblem(cfg)
    if scp_config is None:
        scp_config = ScpConfig()
    seeds = _loss_seeds(problem, result, kind)
    grads = scp_backward(problem, result.tape, seeds, scp_config)
    d_wsm = grads.d_theta_tp.get("w_sm", 0.0)
    d_wsm += float(grads.d_z_ref1 @ result.d_zref1_d_wsm)
    return {
        "w_gamma": grads.d_theta_scp.get("w_gamma", 0.0),
        "w_u": grads.d_theta_scp.get("w_u", 0.0),
        "w_sm": d_wsm,
    }


# -- study drivers ---------------------------------------------------------


def trust_weight_sweep(cfg, log10_w_gamma, log10_w_u, w_sm=1.0,
                       scp_config=None, with_gradient=True):
    """Grid study of the convergence loss over trust-weight exponents.

    One row per (log10 w_gamma, log10 w_u) cell; failed cells record NaN
    loss and gradients and the sweep continues.
    """
    problem = HgvProblem(cfg)
    rows = []
    for lg in log10_w_gamma:
        for lu in log10_w_u:
            wg, wu = 10.0**lg, 10.0**lu
            row = {
                "log10_w_gamma": float(lg),
                "log10_w_u": float(lu),
                "iterations": 0,
                "converged": False,
                "status": "error",
                "loss": np.nan,
                "grad_w_gamma": np.nan,
                "grad_w_u": np.nan,
            }
            try:
                res = run_hgv(cfg, wg, wu, w_sm, scp_config, problem)
            except SingularStateError:
                row["status"] = "singular_reference"
                rows.append(row)
                continue
            row["iterations"] = res.iterations
            row["converged"] = res.converged
            row["status"] = res.status
            if res.iterations > 0:
                row["loss"] = convergence_loss(res)
                if with_gradient:
                    try:
                        g = hgv_loss_gradient(
                            cfg, res, "convergence", scp_config, problem
                        )
                        row["grad_w_gamma"] = g["w_gamma"]
                        row["grad_w_u"] = g["w_u"]
                    except Exception as exc:  # keep sweeping
                        row["status"] += f"|grad_error:{type(exc).__name__}"
            rows.append(row)
    return rows


def surface_mass_sweep(cfg, w_values, w_gamma, w_u, scp_config=None,
                       with_gradient=True, problem=None):
    """Terminal-cost study over the surface-to-mass scaling factor."""
    if problem is None:
        problem = HgvProblem(cfg)
    rows = []
    for w in w_values:
        row = {
            "w_sm": float(w),
            "iterations": 0,
            "converged": False,
            "status": "error",
            "loss": np.nan,
            "grad_w_sm": np.nan,
        }
        try:
            res = run_hgv(cfg, w_gamma, w_u, w, scp_config, problem)
        except SingularStateError:
            row["status"] = "singular_reference"
            rows.append(row)
            continue
        row["iterations"] = res.iterations
        row["converged"] = res.converged
        row["status"] = res.status
        if res.converged:
            row["loss"] = terminal_cost_loss(res)
            if with_gradient:
                try:
                    g = hgv_loss_gradient(
                        cfg, res, "terminal", scp_config, problem
                    )
                    row["grad_w_sm"] = g["w_sm"]
                except Exception as exc:
                    row["status"] += f"|grad_error:{type(exc).__name__}"
        rows.append(row)
    return rows


def entry_trajectory_table(cfg, z_star, w_sm=1.0):
    """Physical-unit node table matching the CSV export layout."""
    N = cfg.N
    T = float(z_star[0])
    X, U = split_nodes(z_star, N)
    t = np.arange(N + 1) * T * cfg.t_scale
    r = X[_IR] * cfg.r_scale
    V = X[_IV] * cfg.v_scale
    alpha = X[_IALP]
    Ma = V / cfg.sound_speed
    L, D, rho = aero_forces(cfg, alpha, Ma, r, V, w_sm)
    pbar = 0.5 * rho * V**2
    qbar = cfg.k_q * np.sqrt(rho) * V**3.15
    nbar = np.sqrt(L**2 + D**2) / (cfg.mass * cfg.g0)
    header = [
        "t", "h", "chi_deg", "phi_deg", "V", "gamma_deg", "psi_deg",
        "alpha_deg", "sigma_deg", "p_dyn", "q_heat", "n_load",
    ]
    data = np.vstack([
        t,
        r - cfg.earth_radius,
        np.degrees(X[_ICHI]),
        np.degrees(X[_IPHI]),
        V,
        np.degrees(X[_IGAM]),
        np.degrees(X[_IPSI]),
        np.degrees(alpha),
        np.degrees(X[_ISIG]),
        pbar,
        qbar,
        nbar,
    ]).T
    return header, data
