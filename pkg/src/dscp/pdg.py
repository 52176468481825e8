"""
Fuel-optimal powered descent guidance as a differentiable SCP problem.

Three-dof rocket landing: states (position, velocity, mass), thrust-vector
controls, trapezoidal transcription with a per-interval virtual control that
absorbs linearization infeasibility, thrust magnitude/pointing cones and a
glideslope cone.  The terminal time t_f is a parameter of every subproblem
(fixed-time transcription), which makes the converged trajectory, and any
loss on it, differentiable in t_f through the sensitivity layer.

Variables are scaled (km-ish position, 100 m/s velocity, mass and thrust
relative to the wet mass) and laid out per node as (state 7, control 3),
nodes 0..N, followed by N virtual-control blocks of 7.

The initial reference comes from a frozen-mass minimum-energy QP solved on
the same trapezoidal grid; because its coefficients also carry t_f, the QP
is differentiated through the same sensitivity machinery and its
contribution is added to the terminal-time gradient.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import sympy as sym

from .engine import HookGradients, ParamSet, ScpConfig, scp_backward, scp_forward
from .socp import ConicProgram, SocConstraint, solve
from .sensitivity import adjoint_solve, assemble_sensitivity_system, extract_coefficient_gradients
from .symdyn import DynamicsModel, rk4_trajectory


class ZeroThrustError(ValueError):
    """Reference thrust vanished at a node; the pointing data is undefined."""


@dataclass
class PdgConfig:
    """Rocket landing scenario: vehicle constants, bounds, grid, scales."""

    u_min: float = 169_000.0       # thrust magnitude lower bound [N]
    u_max: float = 845_200.0       # thrust magnitude upper bound [N]
    eta_max_deg: float = 30.0      # thrust pointing half-angle [deg]
    beta_max_deg: float = 80.0     # glideslope half-angle from vertical [deg]
    I_sp: float = 282.0            # specific impulse [s]
    m0: float = 38_000.0           # wet mass [kg]
    g0: float = 9.80655            # standard gravity [m/s^2]
    N: int = 50                    # trapezoidal intervals
    omega_virtual: float = 10_000.0  # virtual-control penalty weight

    r0: tuple = (5000.0, 500.0, 500.0)     # initial position [m], x up
    v0: tuple = (-150.0, 30.0, -30.0)      # initial velocity [m/s]
    r_f: tuple = (0.0, 0.0, 0.0)           # landing position [m]
    v_f: tuple = (0.0, 0.0, 0.0)           # landing velocity [m/s]

    r_scale: float = 1000.0
    v_scale: float = 100.0

    # trust-region step penalty (scaled variables); damps the iteration
    # without moving its fixed point, see PdgProblem.build_subproblem
    trust_x: float = 0.05
    trust_u: float = 0.05

    @property
    def u_scale(self):
        return self.m0 * self.g0

    @property
    def tan_eta(self):
        return np.tan(np.radians(self.eta_max_deg))

    @property
    def tan_beta(self):
        return np.tan(np.radians(self.beta_max_deg))

    def to_dict(self):
        return {
            "u_min": self.u_min, "u_max": self.u_max,
            "eta_max_deg": self.eta_max_deg, "beta_max_deg": self.beta_max_deg,
            "I_sp": self.I_sp, "m0": self.m0, "g0": self.g0, "N": self.N,
            "omega_virtual": self.omega_virtual,
            "r0": list(self.r0), "v0": list(self.v0),
            "r_f": list(self.r_f), "v_f": list(self.v_f),
            "r_scale": self.r_scale, "v_scale": self.v_scale,
            "trust_x": self.trust_x, "trust_u": self.trust_u,
        }

    @classmethod
    def from_dict(cls, d):
        kw = dict(d)
        for key in ("r0", "v0", "r_f", "v_f"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        return cls(**kw)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


NX, NU = 7, 3     # states (r, v, m), controls (thrust vector)
NW = NX + NU      # per-node variable block


def _scaled_dynamics_model(cfg):
    """Scaled 3-dof dynamics: rdot = v, vdot = g + u/m, mdot = -|u|/Isp g0."""
    rx, ry, rz, vx, vy, vz, m = sym.symbols("rx ry rz vx vy vz m", positive=False)
    ux, uy, uz = sym.symbols("ux uy uz")
    ks_r = cfg.v_scale / cfg.r_scale          # velocity -> position coupling
    ks_v = cfg.g0 / cfg.v_scale               # thrust/gravity -> velocity
    unorm = sym.sqrt(ux**2 + uy**2 + uz**2)
    f = [
        ks_r * vx,
        ks_r * vy,
        ks_r * vz,
        -cfg.g0 / cfg.v_scale + ks_v * ux / m,
        ks_v * uy / m,
        ks_v * uz / m,
        -unorm / cfg.I_sp,
    ]
    return DynamicsModel([rx, ry, rz, vx, vy, vz, m], [ux, uy, uz], f)


def scaled_boundary_state(cfg):
    """Initial state in scaled units (mass fraction 1)."""
    return np.concatenate([
        np.asarray(cfg.r0) / cfg.r_scale,
        np.asarray(cfg.v0) / cfg.v_scale,
        [1.0],
    ])


def split_reference(z_ref, N):
    """(states (7, N+1), controls (3, N+1)) view of a packed reference."""
    nodes = z_ref.reshape(N + 1, NW).T
    return nodes[:NX], nodes[NX:]


def pack_reference(X, U):
    return np.vstack([X, U]).T.ravel()


class PdgProblem:
    """Trajectory-problem adapter: landing subproblems for the SCP engine."""

    def __init__(self, cfg=None):
        self.cfg = cfg or PdgConfig()
        self.model = _scaled_dynamics_model(self.cfg)
        c = self.cfg
        self.n_ref = (c.N + 1) * NW
        self.n_vars = self.n_ref + c.N * NX
        self._gamma0 = self.n_ref  # first virtual-control column
        # virtual-control penalty weights per defect row: the weight applies
        # to the physical-unit defect, so each scaled row carries its scale
        # squared (over the mass scale that normalizes the objective).  With
        # uniform weights on scaled rows the mass row would buy ~kg-level
        # virtual mass at every converged solution and tilt the loss
        # landscape toward short terminal times.
        row_scale = np.array(
            [c.r_scale] * 3 + [c.v_scale] * 3 + [c.m0], dtype=float
        )
        self.gamma_weights = c.omega_virtual * row_scale**2 / c.m0

    # -- layout helpers ----------------------------------------------------

    def x_cols(self, m):
        return np.arange(NW * m, NW * m + NX)

    def u_cols(self, m):
        return np.arange(NW * m + NX, NW * (m + 1))

    def gamma_cols(self, n):
        return np.arange(self._gamma0 + NX * n, self._gamma0 + NX * (n + 1))

    def mass_index(self, m):
        return NW * m + NX - 1

    # -- initial reference ---------------------------------------------------

    def initial_reference(self, t_f, scp_config=None):
        """Frozen-mass minimum-energy guess plus its differentiation record.

        Returns (z_ref, guess) where guess carries the solved QP and the
        structural t_f-derivatives of its coefficients, so a loss seed on the
        reference can be chained into d(loss)/d(t_f).
        """
        program, dA_dT, db_dT = self._guess_program(t_f)
        settings = None if scp_config is None else scp_config.solver
        sol = solve(program, settings)
        if not sol.ok:
            return None, GuessRecord(program, sol, None, dA_dT, db_dT, self.cfg.N)
        record = assemble_sensitivity_system(program, sol)
        z_ref = self._guess_to_reference(sol.z)
        return z_ref, GuessRecord(program, sol, record, dA_dT, db_dT, self.cfg.N)

    def _guess_program(self, t_f):
        """Equality-constrained QP: frozen mass, linear gravity-thrust dynamics."""
        c = self.cfg
        N = c.N
        ng = 9 * (N + 1)  # per node: position 3, velocity 3, thrust 3
        T = t_f / N
        ks_r = c.v_scale / c.r_scale
        ks_v = c.g0 / c.v_scale
        g_row = np.array([-c.g0 / c.v_scale, 0.0, 0.0])

        rows, cols, vals = [], [], []
        drows, dcols, dvals = [], [], []  # d(entry)/dT for T-scaled entries
        b = np.zeros(6 * N + 12)
        db_dT = np.zeros_like(b)

        def put(r, ccol, v, dv=0.0):
            rows.append(r); cols.append(ccol); vals.append(v)
            if dv:
                drows.append(r); dcols.append(ccol); dvals.append(dv)

        for n in range(N):
            base = 6 * n
            xn, xn1 = 9 * n, 9 * (n + 1)
            for i in range(3):
                # position rows: r[n] - r[n+1] + (T/2) ks_r (v[n] + v[n+1]) = 0
                r = base + i
                put(r, xn + i, 1.0)
                put(r, xn1 + i, -1.0)
                put(r, xn + 3 + i, 0.5 * T * ks_r, 0.5 * ks_r)
                put(r, xn1 + 3 + i, 0.5 * T * ks_r, 0.5 * ks_r)
                # velocity rows: v[n] - v[n+1] + (T/2) ks_v (u[n] + u[n+1]) = -T g
                r = base + 3 + i
                put(r, xn + 3 + i, 1.0)
                put(r, xn1 + 3 + i, -1.0)
                put(r, xn + 6 + i, 0.5 * T * ks_v, 0.5 * ks_v)
                put(r, xn1 + 6 + i, 0.5 * T * ks_v, 0.5 * ks_v)
                b[r] = -T * g_row[i]
                db_dT[r] = -g_row[i]
        base = 6 * N
        x0 = scaled_boundary_state(self.cfg)
        for i in range(6):
            put(base + i, i, 1.0)
            b[base + i] = x0[i]
        for i in range(6):
            put(base + 6 + i, 9 * N + i, 1.0)
            b[base + 6 + i] = np.concatenate([
                np.asarray(c.r_f) / c.r_scale, np.asarray(c.v_f) / c.v_scale
            ])[i]

        A = sp.csc_matrix((vals, (rows, cols)), shape=(b.size, ng))
        dA_dT = sp.csc_matrix((dvals, (drows, dcols)), shape=(b.size, ng))
        u_cols = np.concatenate([9 * m + np.arange(6, 9) for m in range(N + 1)])
        Qdiag = np.zeros(ng)
        Qdiag[u_cols] = 2.0
        program = ConicProgram(
            Q=sp.diags(Qdiag).tocsc(),
            c=np.zeros(ng),
            A=A,
            b0=b,
            G0=sp.csc_matrix((0, ng)),
            h0=np.zeros(0),
            cones=[],
        )
        return program, dA_dT, db_dT

    def _guess_to_reference(self, zg):
        N = self.cfg.N
        z_ref = np.zeros(self.n_ref)
        for m in range(N + 1):
            z_ref[NW * m : NW * m + 6] = zg[9 * m : 9 * m + 6]
            z_ref[NW * m + 6] = 1.0  # frozen mass fraction
            z_ref[NW * m + NX : NW * (m + 1)] = zg[9 * m + 6 : 9 * m + 9]
        return z_ref

    # -- engine protocol -----------------------------------------------------

    def params_for(self, t_f, z_ref):
        return ParamSet(z_ref=z_ref, theta_tp={"t_f": float(t_f)})

    def build_subproblem(self, params):
        c = self.cfg
        N = c.N
        n = self.n_vars
        t_f = params.theta_tp["t_f"]
        T = t_f / N
        X, U = split_reference(params.z_ref, N)
        u_norms = np.linalg.norm(U, axis=0)
        if u_norms.min() < 1e-9:
            raise ZeroThrustError(
                f"reference thrust vanished (min |u| = {u_norms.min():.3e})"
            )

        fval = self.model.f(X, U)                  # (7, N+1)
        J = self.model.jacobian(X, U)              # (7, 10, N+1)
        What = np.vstack([X, U])                   # (10, N+1) reference nodes

        # equalities: N dynamics blocks, then boundary conditions
        p = NX * N + NX + 6
        rows, cols, vals = [], [], []
        b = np.zeros(p)

        def put_block(r0, c0, M):
            rr, cc = np.nonzero(M)
            rows.extend((r0 + rr).tolist())
            cols.extend((c0 + cc).tolist())
            vals.extend(M[rr, cc].tolist())

        eye = np.eye(NX)
        for nint in range(N):
            r0 = NX * nint
            JL, JR = J[:, :, nint], J[:, :, nint + 1]
            put_block(r0, NW * nint, 0.5 * T * JL[:, :NX] + eye)
            put_block(r0, NW * nint + NX, 0.5 * T * JL[:, NX:])
            put_block(r0, NW * (nint + 1), 0.5 * T * JR[:, :NX] - eye)
            put_block(r0, NW * (nint + 1) + NX, 0.5 * T * JR[:, NX:])
            put_block(r0, self._gamma0 + NX * nint, -eye)
            resid = (
                JL @ What[:, nint] - fval[:, nint]
                + JR @ What[:, nint + 1] - fval[:, nint + 1]
            )
            b[r0 : r0 + NX] = 0.5 * T * resid
        r0 = NX * N
        x0 = scaled_boundary_state(c)
        put_block(r0, 0, np.eye(NX))
        b[r0 : r0 + NX] = x0
        target = np.concatenate(
            [np.asarray(c.r_f) / c.r_scale, np.asarray(c.v_f) / c.v_scale]
        )
        put_block(r0 + NX, NW * N, np.eye(6, NX))
        b[r0 + NX : r0 + NX + 6] = target
        A = sp.csc_matrix((vals, (rows, cols)), shape=(p, n))

        # thrust lower bound, linearized about the reference direction
        # (the exact constraint |u| >= u_min is concave): uhat' u[m] >= u_min
        uhat = U / u_norms
        g_rows, g_cols, g_vals = [], [], []
        for m in range(N + 1):
            g_rows.extend([m] * NU)
            g_cols.extend(self.u_cols(m).tolist())
            g_vals.extend((-uhat[:, m]).tolist())
        G0 = sp.csc_matrix((g_vals, (g_rows, g_cols)), shape=(N + 1, n))
        h0 = np.full(N + 1, -c.u_min / c.u_scale)

        cones = []
        for m in range(N + 1):  # thrust pointing: |(uy, uz)| <= tan(eta) ux
            a = np.zeros(n)
            a[self.u_cols(m)[0]] = c.tan_eta
            G = sp.csc_matrix(
                (np.ones(2), (np.arange(2), self.u_cols(m)[1:])), shape=(2, n)
            )
            cones.append(SocConstraint(a=a, b=0.0, G=G, h=np.zeros(2)))
        # thrust upper bound kept exact: |u[m]| <= u_max.  Convexity permits
        # it, it is tighter than the linearized cut, and together with the
        # lower-bound cut it makes truly over-tight terminal times infeasible
        # (a reference thrust direction far off vertical leaves no u with
        # uhat' u >= u_min inside the pointing cone and the magnitude ball).
        ub = c.u_max / c.u_scale
        for m in range(N + 1):
            G = sp.csc_matrix(
                (np.ones(NU), (np.arange(NU), self.u_cols(m))), shape=(NU, n)
            )
            cones.append(SocConstraint(a=np.zeros(n), b=ub, G=G, h=np.zeros(NU)))
        # glideslope |(ry, rz)| <= tan(beta) rx at all nodes except the
        # landing point, where the position is pinned to the origin by the
        # boundary equalities and the cone would sit exactly at its vertex
        # with a redundant (non-unique) multiplier
        for m in range(N):
            a = np.zeros(n)
            a[self.x_cols(m)[0]] = c.tan_beta
            G = sp.csc_matrix(
                (np.ones(2), (np.arange(2), self.x_cols(m)[1:3])), shape=(2, n)
            )
            cones.append(SocConstraint(a=a, b=0.0, G=G, h=np.zeros(2)))
        # objective: -final mass fraction + virtual-control penalty + a
        # quadratic trust-region penalty on the step away from the reference.
        # Without the step penalty the subproblem is degenerate in the thrust
        # azimuth wherever the magnitude bounds saturate (the linearized fuel
        # rate only charges the reference-direction component), and the
        # iteration chatters instead of settling; penalizing the step removes
        # the degeneracy while leaving the converged trajectory unbiased.
        w_trust = np.zeros(n)
        for m in range(N + 1):
            w_trust[self.x_cols(m)] = c.trust_x
            w_trust[self.u_cols(m)] = c.trust_u
        Qdiag = 2.0 * w_trust
        Qdiag[self._gamma0 :] = 2.0 * np.tile(self.gamma_weights, N)
        cvec = -2.0 * w_trust * np.concatenate(
            [params.z_ref, np.zeros(n - self.n_ref)]
        )
        cvec[self.mass_index(N)] += -1.0

        program = ConicProgram(
            Q=sp.diags(Qdiag).tocsc(),
            c=cvec,
            A=A,
            b0=b,
            G0=G0,
            h0=h0,
            cones=cones,
        )
        hooks = PdgHooks(
            self, params, T, fval, J, What, u_norms, uhat, b,
            w_trust[: self.n_ref],
        )
        return program, hooks

    def reference_update(self, params, z_star):
        return z_star[: self.n_ref].copy()

    def lift_ref_seed(self, params, g_ref):
        out = np.zeros(self.n_vars)
        out[: self.n_ref] = g_ref
        return out

    def j2_values(self, params, program, z_star):
        """Subproblem objective at z* and at the reference point.

        At the reference the states/controls are the linearization point
        (zero trust-region step), and the virtual controls take exactly the
        trapezoidal defects, so the reference objective is the
        defect-penalized cost of the previous trajectory; the gap vanishing
        is the SCP convergence signal.  The stored quadratic form omits the
        constant trust-penalty term z_ref' W z_ref, added back here.
        """
        c = self.cfg
        N = c.N
        w = np.zeros(self.n_ref)
        for m in range(N + 1):
            w[NW * m : NW * m + NX] = c.trust_x
            w[NW * m + NX : NW * (m + 1)] = c.trust_u
        J2_star = program.objective_value(z_star) + float(
            w @ params.z_ref**2
        )
        X, U = split_reference(params.z_ref, N)
        fval = self.model.f(X, U)
        T = params.theta_tp["t_f"] / N
        defects = X[:, 1:] - X[:, :-1] - 0.5 * T * (fval[:, 1:] + fval[:, :-1])
        J2_ref = -X[NX - 1, N] + float(
            self.gamma_weights @ np.sum(defects**2, axis=1)
        )
        return float(J2_star), float(J2_ref)


@dataclass
class GuessRecord:
    """Solved initial-guess QP plus what its differentiation needs."""

    program: object
    solution: object
    sensitivity: object
    dA_dT: object
    db_dT: np.ndarray
    N: int

    @property
    def ok(self):
        return self.solution.ok

    def t_f_gradient(self, seed_on_reference):
        """Chain a loss seed on the packed reference into d(loss)/d(t_f).

        The seed entries on the frozen mass-fraction components are constants
        of the guess and drop out.
        """
        N = self.N
        seed = np.zeros(self.program.n)
        for m in range(N + 1):
            seed[9 * m : 9 * m + 6] = seed_on_reference[NW * m : NW * m + 6]
            seed[9 * m + 6 : 9 * m + 9] = seed_on_reference[
                NW * m + NX : NW * (m + 1)
            ]
        y = adjoint_solve(self.sensitivity, seed)
        grads = extract_coefficient_gradients(self.sensitivity, y)
        dT = float(np.sum(self.dA_dT.toarray() * grads.dA)) + float(
            self.db_dT @ grads.db0
        )
        return dT / N


class PdgHooks:
    """Reverse-mode pull-back of one landing subproblem's coefficients.

    Maps the adjoint's coefficient gradients onto the reference trajectory
    (through the second derivatives of the dynamics and the thrust-direction
    linearization) and onto the terminal time (through every T-scaled
    coefficient).
    """

    def __init__(self, problem, params, T, fval, J, What, u_norms, uhat, b_dyn,
                 w_trust):
        self.problem = problem
        self.params = params
        self.T = T
        self.fval = fval
        self.J = J
        self.What = What
        self.u_norms = u_norms
        self.uhat = uhat
        self.b_dyn = b_dyn
        self.w_trust = w_trust

    def vjp(self, record, adjoint):
        prob = self.problem
        cfg = prob.cfg
        N = cfg.N
        T = self.T
        grads = extract_coefficient_gradients(record, adjoint)
        dA, db = grads.dA, grads.db0

        # accumulate per-node weights on the Jacobian entries
        Wtot = np.zeros((NX, NW, N + 1))
        dT = 0.0
        for nint in range(N):
            r = slice(NX * nint, NX * (nint + 1))
            db_r = db[r]
            for side, node in ((0, nint), (1, nint + 1)):
                cols = np.arange(NW * node, NW * (node + 1))
                blk = dA[r][:, cols]
                Wtot[:, :, node] += 0.5 * T * blk + 0.5 * T * np.outer(
                    db_r, self.What[:, node]
                )
                dT += 0.5 * float(np.sum(blk * self.J[:, :, node]))
            dT += float(db_r @ self.b_dyn[r]) / T

        hess = prob.model.hessian(*split_reference(self.params.z_ref, N))
        d_ref_nodes = np.einsum("ijm,ijkm->km", Wtot, hess)  # (10, N+1)

        # thrust lower-bound rows carry -u/|u| on node m's controls; pull
        # back through d(u/|u|)/du (pointing and magnitude cones are
        # reference-independent)
        dG0 = grads.dG0
        for m in range(N + 1):
            gu = -dG0[m, prob.u_cols(m)]
            if gu.any():
                P = (
                    np.eye(NU) - np.outer(self.uhat[:, m], self.uhat[:, m])
                ) / self.u_norms[m]
                d_ref_nodes[NX:, m] += P @ gu

        d_z_ref = d_ref_nodes.T.ravel()
        # trust-penalty linear term c += -2 w z_ref on the node variables
        d_z_ref += -2.0 * self.w_trust * grads.dc[: prob.n_ref]
        return HookGradients(
            d_z_ref=d_z_ref,
            d_theta_tp={"t_f": dT / N},
        )


# -- pipeline helpers --------------------------------------------------------


def max_virtual_control(problem, z_star):
    """Largest per-interval virtual-control norm of a solved subproblem."""
    gam = z_star[problem._gamma0 :].reshape(-1, NX)
    return float(np.linalg.norm(gam, axis=1).max())


def tight_dynamics_solve(problem, params):
    """Solve the subproblem with the virtual control excised.

    Quadratically penalized virtual controls never reach exactly zero (they
    settle at a small floor set by the dynamics multipliers over the penalty
    weight), so a converged run only proves the *relaxed* subproblem solvable.
    Dropping the virtual-control columns makes the linearized dynamics hard
    equalities; at an over-tight terminal time no trajectory satisfies them
    together with the thrust bounds and the solver reports infeasibility,
    which is the honest failure signal for the sweep.  When it IS feasible,
    its optimum satisfies the transcribed dynamics to solver precision and is
    the certified trajectory a physical replay should use (the relaxed
    solution carries the virtual-control floor as a nonphysical defect).
    """
    program, _ = problem.build_subproblem(params)
    k = problem.n_ref
    tight = ConicProgram(
        Q=program.Q[:k, :k].tocsc(),
        c=program.c[:k],
        A=program.A[:, :k].tocsc(),
        b0=program.b0,
        G0=program.G0[:, :k].tocsc(),
        h0=program.h0,
        cones=[
            SocConstraint(a=cn.a[:k], b=cn.b, G=cn.G[:, :k].tocsc(), h=cn.h)
            for cn in program.cones
        ],
    )
    return solve(tight)


@dataclass
class PdgRunResult:
    """One full pipeline run at a fixed terminal time."""

    t_f: float
    tape: object
    guess: object
    z_ref1: np.ndarray
    loss: float = np.nan            # physical -final mass [kg]
    d_loss_dt_f: float = np.nan
    converged: bool = False
    status: str = ""
    iterations: int = 0
    max_gamma: float = np.nan
    tight_status: str = ""
    z_tight: np.ndarray = None  # virtual-control-free trajectory when feasible


def run_pdg(cfg, t_f, scp_config=None, problem=None):
    """Guess QP + SCP forward pass; loss is the negated final mass in kg.

    A converged run is certified by re-solving the final subproblem with the
    virtual control removed; if that tight problem is infeasible the run is
    downgraded to a solver failure (the relaxation converged onto a
    nonvanishing virtual control, not onto a trajectory).
    """
    problem = problem or PdgProblem(cfg)
    z_ref, guess = problem.initial_reference(t_f, scp_config)
    if z_ref is None:
        return PdgRunResult(
            t_f=t_f, tape=None, guess=guess, z_ref1=None,
            status="guess_failure",
        )
    tape = scp_forward(problem, problem.params_for(t_f, z_ref), scp_config)
    result = PdgRunResult(
        t_f=t_f, tape=tape, guess=guess, z_ref1=z_ref,
        converged=tape.converged, status=tape.status,
        iterations=tape.n_iterations,
    )
    if tape.iterations:
        z = tape.final_solution
        result.loss = -cfg.m0 * z[problem.mass_index(cfg.N)]
        result.max_gamma = max_virtual_control(problem, z)
    if tape.converged:
        final_params = tape.iterations[-1].params.with_reference(
            problem.reference_update(tape.iterations[-1].params, z)
        )
        tight = tight_dynamics_solve(problem, final_params)
        result.tight_status = tight.status.name.lower()
        if tight.ok:
            result.z_tight = tight.z
        else:
            result.converged = False
            result.status = "solver_failure"
    return result


def pdg_loss_gradient(cfg, result, scp_config=None, problem=None):
    """d(-final mass)/d(t_f) for a converged-or-stopped run, through the
    whole chain: every SCP subproblem plus the initial-guess QP."""
    problem = problem or PdgProblem(cfg)
    tape = result.tape
    if tape is None or not tape.iterations:
        raise ValueError(f"run has no differentiable tape (status {result.status!r})")
    seed = np.zeros(problem.n_vars)
    seed[problem.mass_index(cfg.N)] = -cfg.m0
    seeds = [None] * (tape.n_iterations - 1) + [seed]
    grads = scp_backward(problem, tape, seeds, scp_config)
    d_t_f = grads.d_theta_tp.get("t_f", 0.0)
    d_t_f += result.guess.t_f_gradient(grads.d_z_ref1)
    return float(d_t_f)


def terminal_time_sweep(cfg, t_grid, scp_config=None, with_gradient=True):
    """Loss and gradient across a terminal-time grid.

    Returns a list of dict rows; failed runs carry NaN loss and their status.
    """
    problem = PdgProblem(cfg)
    out = []
    for t_f in t_grid:
        result = run_pdg(cfg, float(t_f), scp_config, problem)
        row = {
            "t_f": float(t_f),
            "loss": result.loss,
            "final_mass": -result.loss if np.isfinite(result.loss) else np.nan,
            "iterations": result.iterations,
            "converged": bool(result.converged),
            "status": result.status,
            "grad_t_f": np.nan,
        }
        if with_gradient and result.tape is not None and result.tape.iterations:
            try:
                row["grad_t_f"] = pdg_loss_gradient(cfg, result, scp_config, problem)
            except Exception as exc:  # keep the sweep alive, record the hole
                row["status"] = f"{row['status']}|grad_error:{type(exc).__name__}"
        out.append(row)
    return out


def rk4_verify(cfg, z_star, t_f, substeps=20, problem=None):
    """Physical replay: integrate the true dynamics under the solved controls.

    The solved node controls are interpolated linearly and integrated with
    RK4 from the initial state; defects against the transcribed trajectory
    are reported in physical units.
    """
    problem = problem or PdgProblem(cfg)
    N = cfg.N
    X, U = split_reference(z_star[: problem.n_ref], N)
    T = t_f / N
    X_rk = rk4_trajectory(problem.model, scaled_boundary_state(cfg), U, T,
                          substeps=substeps)
    dX = X_rk - X
    pos = np.linalg.norm(dX[:3], axis=0) * cfg.r_scale
    vel = np.linalg.norm(dX[3:6], axis=0) * cfg.v_scale
    mass = np.abs(dX[6]) * cfg.m0
    return {
        "terminal_position_defect_m": float(pos[-1]),
        "terminal_velocity_defect_mps": float(vel[-1]),
        "terminal_mass_defect_kg": float(mass[-1]),
        "max_position_defect_m": float(pos.max()),
        "max_velocity_defect_mps": float(vel.max()),
        "position_defect_m": pos,
        "velocity_defect_mps": vel,
    }


def trajectory_table(cfg, z_star, t_f):
    """Physical-unit node table matching the CSV export layout."""
    N = cfg.N
    X, U = split_reference(z_star[: (N + 1) * NW], N)
    t = np.linspace(0.0, t_f, N + 1)
    r = X[:3] * cfg.r_scale
    v = X[3:6] * cfg.v_scale
    m = X[6] * cfg.m0
    u = U * cfg.u_scale
    unorm = np.linalg.norm(u, axis=0)
    gimbal = np.degrees(np.arctan2(np.linalg.norm(u[1:], axis=0), u[0]))
    header = ["t", "rx", "ry", "rz", "vx", "vy", "vz", "m",
              "ux", "uy", "uz", "u_norm", "gimbal_deg"]
    data = np.vstack([t, r, v, m, u, unorm, gimbal]).T
    return header, data
