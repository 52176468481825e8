"""
Local sensitivity analysis of solved cone programs.

Given an optimal primal-dual pair of a ConicProgram, this module builds the
linear system that the implicit-function theorem attaches to the active KKT
conditions and uses it in two directions:

* forward: directional derivatives of (z*, duals) for a given perturbation of
  the program coefficients;
* adjoint: one linear solve that turns a loss gradient dL/dz* into gradients
  of L with respect to every coefficient of the program.

Strictly active constraints are detected with thresholded tests; weakly
active rows (tight but with negligible dual) are excluded and counted.  A
second-order cone whose solution sits at the cone vertex makes the implicit
system ill-posed and is reported as a hard error.

The system matrix is

    H = [ R    A'   G0a'  S ]
        [ A    0    0     0 ]
        [ G0a  0    0     0 ]
        [ S'   0    0     0 ]

with R the cone-curvature-corrected Hessian, G0a the active linear
inequality rows and S the matrix of outward cone normals s_i.  H is
factorized as a permuted no-pivot LDL' (AMD ordering, signed diagonal
regularization, iterative refinement against the unregularized matrix).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

import cvxopt
import cvxopt.amd

from .socp import ConicProgram, SocConstraint


class SensitivityError(RuntimeError):
    """Raised when the sensitivity system cannot be built or solved."""


class ConeVertexError(SensitivityError):
    """Active cone at its vertex (g0 ~ 0): directional derivatives undefined."""


@dataclass
class ActiveSetTolerances:
    eps_res: float = 1e-6   # max residual for a constraint to count as tight
    eps_mu: float = 1e-6    # min linear-inequality dual for strict activity
    eps_lam: float = 1e-6   # min cone dual g0-component for strict activity
    vertex_tol: float = 1e-8  # g0 below this with an active dual is degenerate


@dataclass
class ActiveSets:
    """Indices of strictly active constraints plus weak-activity counts."""

    lin_rows: np.ndarray
    soc_indices: np.ndarray
    n_weak_lin: int = 0
    n_weak_soc: int = 0

    @property
    def n_lin(self):
        return len(self.lin_rows)

    @property
    def n_soc(self):
        return len(self.soc_indices)


def detect_active_sets(program, sol, tol=None):
    """Threshold-classify constraints at an optimal point.

    A linear row j is strictly active when its slack (h0 - G0 z)_j lies in
    [-eps_res, eps_res] and mu_j > eps_mu; a cone i when g0 - ||g1|| lies in
    [-eps_res, eps_res] and lam_i0 >= eps_lam.  Tight rows whose dual falls
    below the threshold are weakly active: dropped and counted.  An active
    cone with g0 <= vertex_tol raises ConeVertexError.
    """
    if tol is None:
        tol = ActiveSetTolerances()
    z = sol.z

    lin_rows = []
    n_weak_lin = 0
    if program.q:
        slack = program.h0 - program.G0 @ z
        for j in range(program.q):
            if abs(slack[j]) <= tol.eps_res:
                if sol.mu[j] > tol.eps_mu:
                    lin_rows.append(j)
                else:
                    n_weak_lin += 1

    soc_indices = []
    n_weak_soc = 0
    for i, cone in enumerate(program.cones):
        g0, g1 = cone.residual(z)
        gap = g0 - np.linalg.norm(g1)
        lam0 = sol.lambdas[i][0]
        if abs(gap) <= tol.eps_res:
            if lam0 >= tol.eps_lam:
                if g0 <= tol.vertex_tol:
                    raise ConeVertexError(
                        f"cone {i} is active at its vertex (g0 = {g0:.3e})"
                    )
                soc_indices.append(i)
            else:
                n_weak_soc += 1

    return ActiveSets(
        lin_rows=np.asarray(lin_rows, dtype=int),
        soc_indices=np.asarray(soc_indices, dtype=int),
        n_weak_lin=n_weak_lin,
        n_weak_soc=n_weak_soc,
    )


class LdlFactor:
    """Permuted no-pivot LDL' factorization of a sparse symmetric matrix.

    The matrix is symmetrically equilibrated (Jacobi row/column scaling, so
    quadratic objective weights spanning many orders of magnitude do not
    poison the pivots), AMD-ordered, given a signed diagonal shift (+delta
    on the first n_primal entries, -delta on the rest, which makes a saddle
    system quasidefinite and hence factorizable without pivoting), and
    handed to SuperLU with pivoting disabled, which then performs exactly
    the LDL' elimination.  Solves are iteratively refined against the
    unshifted, unscaled matrix, so neither the shift nor the equilibration
    leaks into results.
    """

    def __init__(self, H, n_primal, reg_scale=1e-10, reg_max=1e-6):
        self.H = H.tocsc()
        n = H.shape[0]
        self.n_primal = n_primal
        sign = np.ones(n)
        sign[n_primal:] = -1.0
        if n and self.H.nnz:
            rnorm = np.abs(self.H).max(axis=1).toarray().ravel()
            rnorm[rnorm == 0.0] = 1.0
        else:
            rnorm = np.ones(n)
        d = 1.0 / np.sqrt(rnorm)
        self._equil = d
        D = sp.diags(d)
        Hs = (D @ self.H @ D).tocsc()
        diag_scale = 1.0 + (np.abs(Hs.diagonal()).max() if n else 0.0)
        self.perm = _amd_order(Hs)
        iperm = np.empty(n, dtype=int)
        iperm[self.perm] = np.arange(n)
        self._iperm = iperm

        delta = reg_scale * diag_scale
        last_exc = None
        while delta <= reg_max * diag_scale * (1 + 1e-12):
            Hreg = (Hs + sp.diags(delta * sign)).tocsc()
            Hp = Hreg[self.perm][:, self.perm].tocsc()
            try:
                lu = splu(
                    Hp,
                    permc_spec="NATURAL",
                    diag_pivot_thresh=0.0,
                    options=dict(SymmetricMode=True),
                )
            except RuntimeError as exc:  # singular factor
                last_exc = exc
                delta *= 2.0
                continue
            self._lu = lu
            self.delta = delta
            self.reg_sign = sign
            self._Hs = Hs
            if self._probe_ok():
                return
            delta *= 2.0
        raise SensitivityError(
            f"LDL' factorization failed up to delta={delta:.3e}"
            + (f" ({last_exc})" if last_exc else "")
        )

    def _probe_ok(self):
        """One refined solve against a fixed probe; rejects junk factors."""
        n = self.H.shape[0]
        if n == 0:
            return True
        rhs = self.H @ np.ones(n)
        x, resid = self.solve(rhs, return_residual=True)
        scale = 1.0 + np.abs(rhs).max()
        return np.isfinite(resid) and resid <= 1e-8 * scale

    def _raw_solve(self, rhs):
        """One factor solve of H x = rhs through the equilibration."""
        d = self._equil
        y = d * rhs
        x = np.empty_like(rhs)
        x[self.perm] = self._lu.solve(y[self.perm])
        return d * x

    def solve(self, rhs, max_refine=5, return_residual=False):
        """Solve H x = rhs with iterative refinement against H itself."""
        if rhs.size == 0:
            return (rhs.copy(), 0.0) if return_residual else rhs.copy()
        x = self._raw_solve(rhs)
        resid = np.inf
        tol = 1e-12 * (1.0 + np.abs(rhs).max())
        for _ in range(max_refine):
            r = rhs - self.H @ x
            resid = np.abs(r).max(initial=0.0)
            if resid <= tol:
                break
            x = x + self._raw_solve(r)
        else:
            r = rhs - self.H @ x
            resid = np.abs(r).max(initial=0.0)
        if return_residual:
            return x, resid
        return x

    @property
    def L(self):
        return self._lu.L

    @property
    def D(self):
        return self._lu.U.diagonal()

    @property
    def P(self):
        return self.perm

    def reconstruction_error(self):
        """max |P'LDL'P - (H_equilibrated + delta*sign)| over all entries."""
        L = self._lu.L
        rec = (L @ sp.diags(self.D) @ L.T).tocsc()
        Hreg = (self._Hs + sp.diags(self.delta * self.reg_sign)).tocsc()
        diff = rec - Hreg[self.perm][:, self.perm]
        return abs(diff).max() if diff.nnz else 0.0


def _amd_order(H):
    """Approximate-minimum-degree ordering of a sparse symmetric matrix."""
    n = H.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    coo = H.tocoo()
    pattern = cvxopt.spmatrix(
        1.0, coo.row.astype(int).tolist(), coo.col.astype(int).tolist(), (n, n)
    )
    return np.array(list(cvxopt.amd.order(pattern)), dtype=int)


@dataclass
class SensitivityRecord:
    """Everything needed to differentiate through one solved program."""

    program: ConicProgram
    z: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    lambdas: list
    active: ActiveSets
    H: sp.csc_matrix
    factor: LdlFactor
    cone_g0: dict      # active cone index -> g0
    cone_g1: dict      # active cone index -> g1 array
    cone_s: dict       # active cone index -> outward normal s_i

    @property
    def n(self):
        return self.program.n

    @property
    def block_dims(self):
        """(n, p, n_active_lin, n_active_soc) row blocks of H."""
        return (
            self.program.n,
            self.program.p,
            self.active.n_lin,
            self.active.n_soc,
        )


@dataclass
class AdjointVectors:
    """Solution of H y = [dL/dz; 0; 0; 0], split by block."""

    y_z: np.ndarray
    y_nu: np.ndarray
    y_mu: np.ndarray   # only active linear rows, in active-set order
    y_s: np.ndarray    # only active cones, in active-set order
    active: ActiveSets

    def y_mu_full(self, q):
        out = np.zeros(q)
        out[self.active.lin_rows] = self.y_mu
        return out

    def y_s_by_cone(self, n_cones):
        out = np.zeros(n_cones)
        out[self.active.soc_indices] = self.y_s
        return out


def assemble_sensitivity_system(program, sol, active=None, tol=None,
                                reg_scale=1e-10, reg_max=1e-6):
    """Build and factorize the active-set KKT sensitivity system.

    Returns a SensitivityRecord holding the assembled H, its LDL' factor and
    the cached cone geometry (g0, g1, outward normals) used by both solve
    directions and by the gradient read-outs.
    """
    if active is None:
        active = detect_active_sets(program, sol, tol)
    z = sol.z
    n, p = program.n, program.p

    R = program.Q.tocsc().copy()
    cone_g0, cone_g1, cone_s = {}, {}, {}
    s_cols = []
    for i in active.soc_indices:
        cone = program.cones[i]
        g0, g1 = cone.residual(z)
        lam0 = sol.lambdas[i][0]
        w = cone.G.T @ g1  # dense (n,)
        # curvature of the cone boundary, scaled by the active dual
        corr = (lam0 / g0) * (cone.G.T @ cone.G)
        nz = np.nonzero(w)[0]
        if nz.size:
            ii, jj = np.meshgrid(nz, nz, indexing="ij")
            outer = sp.csc_matrix(
                (np.outer(w[nz], w[nz]).ravel(), (ii.ravel(), jj.ravel())),
                shape=(n, n),
            )
            corr = corr - (lam0 / g0**3) * outer
        R = R + corr
        s_i = w / g0 - cone.a
        cone_g0[i] = g0
        cone_g1[i] = g1
        cone_s[i] = s_i
        s_cols.append(s_i)

    G0a = program.G0[active.lin_rows] if active.n_lin else sp.csc_matrix((0, n))
    S = (
        sp.csc_matrix(np.column_stack(s_cols))
        if s_cols
        else sp.csc_matrix((n, 0))
    )
    A = program.A

    H = sp.bmat(
        [
            [R, A.T if p else None, G0a.T if active.n_lin else None, S if active.n_soc else None],
            [A if p else None, None, None, None],
            [G0a if active.n_lin else None, None, None, None],
            [S.T if active.n_soc else None, None, None, None],
        ],
        format="csc",
    )
    # bmat drops all-None rows; rebuild explicitly when only R is present
    if H.shape[0] != n + p + active.n_lin + active.n_soc:
        H = R.tocsc()

    factor = LdlFactor(H, n_primal=n, reg_scale=reg_scale, reg_max=reg_max)
    return SensitivityRecord(
        program=program,
        z=z.copy(),
        nu=sol.nu.copy(),
        mu=sol.mu.copy(),
        lambdas=[lam.copy() for lam in sol.lambdas],
        active=active,
        H=H,
        factor=factor,
        cone_g0=cone_g0,
        cone_g1=cone_g1,
        cone_s=cone_s,
    )


@dataclass
class ConePerturbation:
    da: np.ndarray = None
    db: float = 0.0
    dG: object = None
    dh: np.ndarray = None


@dataclass
class CoefficientPerturbation:
    """Direction in coefficient space; None fields mean zero."""

    dQ: object = None
    dc: np.ndarray = None
    dA: object = None
    db0: np.ndarray = None
    dG0: object = None
    dh0: np.ndarray = None
    dcones: dict = field(default_factory=dict)


def apply_perturbation(program, pert, t):
    """Return a new ConicProgram equal to program + t * pert."""

    def bump(M, dM):
        if dM is None:
            return M.copy()
        return (M + t * sp.csc_matrix(dM)).tocsc()

    def bumpv(v, dv):
        if dv is None:
            return v.copy()
        return v + t * np.asarray(dv, dtype=float)

    cones = []
    for i, cone in enumerate(program.cones):
        cp = pert.dcones.get(i)
        if cp is None:
            cones.append(SocConstraint(cone.a.copy(), cone.b, cone.G.copy(), cone.h.copy()))
        else:
            cones.append(
                SocConstraint(
                    bumpv(cone.a, cp.da),
                    cone.b + t * cp.db,
                    bump(cone.G, cp.dG),
                    bumpv(cone.h, cp.dh),
                )
            )
    return ConicProgram(
        Q=bump(program.Q, pert.dQ),
        c=bumpv(program.c, pert.dc),
        A=bump(program.A, pert.dA),
        b0=bumpv(program.b0, pert.db0),
        G0=bump(program.G0, pert.dG0),
        h0=bumpv(program.h0, pert.dh0),
        cones=cones,
    )


def perturbation_rhs(record, pert):
    """Assemble r_Delta = [-r_z; r_A; r_G; r_S] for a coefficient direction."""
    prog = record.program
    z = record.z
    n, p, n_lin, n_soc = record.block_dims

    r_z = np.zeros(n)
    if pert.dQ is not None:
        r_z += sp.csc_matrix(pert.dQ) @ z
    if pert.dc is not None:
        r_z += np.asarray(pert.dc, dtype=float)
    dA = sp.csc_matrix(pert.dA) if pert.dA is not None else None
    if dA is not None:
        r_z += dA.T @ record.nu
    dG0 = sp.csc_matrix(pert.dG0) if pert.dG0 is not None else None
    if dG0 is not None:
        r_z += dG0.T @ record.mu  # inactive rows have (numerically) zero mu

    r_A = np.zeros(p)
    if pert.db0 is not None:
        r_A += np.asarray(pert.db0, dtype=float)
    if dA is not None:
        r_A -= dA @ z

    r_G = np.zeros(n_lin)
    if n_lin:
        dG0z = dG0 @ z if dG0 is not None else None
        for k, j in enumerate(record.active.lin_rows):
            if pert.dh0 is not None:
                r_G[k] += pert.dh0[j]
            if dG0z is not None:
                r_G[k] -= dG0z[j]

    r_S = np.zeros(n_soc)
    for k, i in enumerate(record.active.soc_indices):
        cp = pert.dcones.get(i)
        if cp is None:
            continue
        g0 = record.cone_g0[i]
        g1 = record.cone_g1[i]
        lam0 = record.lambdas[i][0]
        cone = prog.cones[i]
        da = np.asarray(cp.da, dtype=float) if cp.da is not None else None
        dG = sp.csc_matrix(cp.dG) if cp.dG is not None else None
        dh = np.asarray(cp.dh, dtype=float) if cp.dh is not None else None

        dg1_param = np.zeros(g1.size)
        if dG is not None:
            dg1_param += dG @ z
        if dh is not None:
            dg1_param += dh

        if dG is not None:
            r_z += lam0 * (dG.T @ g1) / g0
        if dg1_param.any():
            proj = dg1_param - g1 * (g1 @ dg1_param) / g0**2
            r_z += (lam0 / g0) * (cone.G.T @ proj)
        if da is not None:
            r_z -= lam0 * da

        r_S[k] += cp.db
        if da is not None:
            r_S[k] += da @ z
        if dg1_param.any():
            r_S[k] -= (g1 @ dg1_param) / g0

    return np.concatenate([-r_z, r_A, r_G, r_S])


def forward_directional_derivative(record, pert):
    """Directional derivatives of the primal-dual solution.

    Returns (dz, dnu, dmu, dlam0) with dmu scattered over all linear rows
    (zeros off the active set) and dlam0 over all cones.
    """
    rhs = perturbation_rhs(record, pert)
    sol = record.factor.solve(rhs)
    n, p, n_lin, n_soc = record.block_dims
    dz = sol[:n]
    dnu = sol[n : n + p]
    dmu = np.zeros(record.program.q)
    dmu[record.active.lin_rows] = sol[n + p : n + p + n_lin]
    dlam0 = np.zeros(len(record.program.cones))
    dlam0[record.active.soc_indices] = sol[n + p + n_lin :]
    return dz, dnu, dmu, dlam0


def adjoint_solve(record, dL_dz):
    """Solve H y = [dL/dz; 0; 0; 0] and split y by block."""
    n, p, n_lin, n_soc = record.block_dims
    rhs = np.zeros(n + p + n_lin + n_soc)
    rhs[:n] = dL_dz
    y = record.factor.solve(rhs)
    return AdjointVectors(
        y_z=y[:n],
        y_nu=y[n : n + p],
        y_mu=y[n + p : n + p + n_lin],
        y_s=y[n + p + n_lin :],
        active=record.active,
    )


@dataclass
class CoefficientGradients:
    """Dense loss gradients for every coefficient of a program.

    Second-order-cone entries for inactive cones and rows of dG0/dh0 off the
    active set are exactly zero.  dQ is symmetrized.
    """

    dQ: np.ndarray
    dc: np.ndarray
    dA: np.ndarray
    db0: np.ndarray
    dG0: np.ndarray
    dh0: np.ndarray
    dcones: list  # per cone: dict(da=..., db=..., dG=..., dh=...)

    def contract(self, pert):
        """Inner product of these gradients with a perturbation direction."""
        total = 0.0
        if pert.dQ is not None:
            total += float(np.sum(sp.csc_matrix(pert.dQ).toarray() * self.dQ))
        if pert.dc is not None:
            total += float(self.dc @ np.asarray(pert.dc, dtype=float))
        if pert.dA is not None:
            total += float(np.sum(sp.csc_matrix(pert.dA).toarray() * self.dA))
        if pert.db0 is not None:
            total += float(self.db0 @ np.asarray(pert.db0, dtype=float))
        if pert.dG0 is not None:
            total += float(np.sum(sp.csc_matrix(pert.dG0).toarray() * self.dG0))
        if pert.dh0 is not None:
            total += float(self.dh0 @ np.asarray(pert.dh0, dtype=float))
        for i, cp in pert.dcones.items():
            gc = self.dcones[i]
            if cp.da is not None:
                total += float(gc["da"] @ np.asarray(cp.da, dtype=float))
            total += gc["db"] * cp.db
            if cp.dG is not None:
                total += float(np.sum(sp.csc_matrix(cp.dG).toarray() * gc["dG"]))
            if cp.dh is not None:
                total += float(gc["dh"] @ np.asarray(cp.dh, dtype=float))
        return total


def extract_coefficient_gradients(record, y):
    """Gradient of the loss with respect to every program coefficient.

    y is the AdjointVectors from adjoint_solve seeded with dL/dz*.  The
    read-outs follow from dL = y' r_Delta applied to the residual assembly in
    perturbation_rhs; signs here are the single source of truth and are
    pinned by finite-difference tests.
    """
    prog = record.program
    z = record.z
    n, p = prog.n, prog.p
    y_z = y.y_z

    outer_zy = np.outer(y_z, z)
    dQ = -0.5 * (outer_zy + outer_zy.T)
    dc = -y_z
    dA = -(np.outer(record.nu, y_z) + np.outer(y.y_nu, z)) if p else np.zeros((0, n))
    db0 = y.y_nu.copy()

    dG0 = np.zeros((prog.q, n))
    dh0 = np.zeros(prog.q)
    for k, j in enumerate(record.active.lin_rows):
        dG0[j] = -(record.mu[j] * y_z + y.y_mu[k] * z)
        dh0[j] = y.y_mu[k]

    dcones = []
    active_pos = {i: k for k, i in enumerate(record.active.soc_indices)}
    for i, cone in enumerate(prog.cones):
        m1 = cone.G.shape[0]
        if i not in active_pos:
            dcones.append(
                dict(
                    da=np.zeros(n),
                    db=0.0,
                    dG=np.zeros((m1, n)),
                    dh=np.zeros(m1),
                )
            )
            continue
        k = active_pos[i]
        g0 = record.cone_g0[i]
        g1 = record.cone_g1[i]
        lam0 = record.lambdas[i][0]
        y_si = y.y_s[k]
        Gy = cone.G @ y_z
        proj_Gy = Gy - g1 * (g1 @ Gy) / g0**2
        da = lam0 * y_z + y_si * z
        db = float(y_si)
        dG = (
            -(lam0 / g0) * (np.outer(g1, y_z) + np.outer(proj_Gy, z))
            - (y_si / g0) * np.outer(g1, z)
        )
        dh = -(lam0 / g0) * proj_Gy - (y_si / g0) * g1
        dcones.append(dict(da=da, db=db, dG=dG, dh=dh))

    return CoefficientGradients(
        dQ=dQ, dc=dc, dA=dA, db0=db0, dG0=dG0, dh0=dh0, dcones=dcones
    )


def _worst_violation(program, z):
    """Largest constraint violation of z over the full constraint set."""
    v = 0.0
    if program.p:
        v = max(v, float(np.abs(program.A @ z - program.b0).max()))
    if program.q:
        v = max(v, float((program.G0 @ z - program.h0).max(initial=0.0)))
    for cone in program.cones:
        g0, g1 = cone.residual(z)
        v = max(v, float(np.linalg.norm(g1) - g0))
    return v


def refine_kkt_point(program, sol, active=None, tol=None, iters=3):
    """Newton-refine a solver solution on its active-set KKT equations.

    Interior-point output is accurate only to the solver tolerances, which
    limits downstream finite differencing.  With the active set fixed, the
    optimality conditions reduce to a smooth square nonlinear system in
    (z, nu, mu_active, lam0_active); a few sparse Newton steps push the
    residual to machine precision.  Duals of inactive constraints are set
    to exact zero and active cone duals are rebuilt on the cone boundary.

    The Newton step sees only the strongly active constraints, so it can
    push a weakly active (dropped) one into visible violation; the refined
    point is accepted only if it is no less feasible than the input over
    the FULL constraint set, otherwise the input is returned unchanged.

    Returns a refined copy of the solution (the input is not modified).
    """
    from dataclasses import replace

    if active is None:
        active = detect_active_sets(program, sol, tol)
    n, p = program.n, program.p
    lin = np.asarray(active.lin_rows, dtype=int)
    soc = np.asarray(active.soc_indices, dtype=int)
    n_lin, n_soc = lin.size, soc.size

    Q = sp.csc_matrix(program.Q)
    A = sp.csc_matrix(program.A)
    G0 = sp.csc_matrix(program.G0)
    G0a = G0[lin] if n_lin else sp.csc_matrix((0, n))
    h0a = np.asarray(program.h0)[lin] if n_lin else np.zeros(0)
    cones = [program.cones[i] for i in soc]
    Gsp = [sp.csc_matrix(c.G) for c in cones]

    z = sol.z.astype(float).copy()
    nu = sol.nu.astype(float).copy()
    mu_a = sol.mu[lin].astype(float).copy() if n_lin else np.zeros(0)
    lam0 = np.array([sol.lambdas[i][0] for i in soc], dtype=float)

    cvec = np.asarray(program.c)
    b0 = np.asarray(program.b0)
    n_dual = p + n_lin + n_soc
    stop = 1e-13 * (1.0 + float(np.abs(z).max(initial=0.0)))
    for _ in range(iters):
        S = np.zeros((n, n_soc))
        F1 = Q @ z + cvec + A.T @ nu
        if n_lin:
            F1 = F1 + G0a.T @ mu_a
        F4 = np.zeros(n_soc)
        rows4 = np.zeros((n_soc, n))
        topleft = Q.copy()
        for k, cone in enumerate(cones):
            g0, g1 = cone.residual(z)
            norm_g1 = np.linalg.norm(g1)
            if g0 <= 0.0 or norm_g1 <= 0.0:
                return sol  # geometry collapsed; refuse to refine
            G = Gsp[k]
            w = G.T @ g1
            a = np.asarray(cone.a)
            s = w / g0 - a
            S[:, k] = s
            F1 = F1 + lam0[k] * s
            F4[k] = norm_g1 - g0
            # d(lam0 * s)/dz and d(|g1| - g0)/dz
            w_col = sp.csc_matrix(w.reshape(n, 1))
            a_row = sp.csc_matrix(a.reshape(1, n))
            topleft = topleft + lam0[k] * (
                (G.T @ G) / g0 - (w_col @ a_row) / g0**2
            )
            rows4[k] = G.T @ (g1 / norm_g1) - a

        F = np.concatenate([F1, A @ z - b0, G0a @ z - h0a, F4])
        if np.abs(F).max(initial=0.0) < stop:
            break
        # asymmetric Newton Jacobian: the upper cone block is S while the
        # lower one is the gradient of the boundary residual, and they only
        # coincide at an exact KKT point
        Zd = sp.csc_matrix((n_dual, n_dual))
        upper = sp.hstack(
            [topleft, A.T, G0a.T, sp.csc_matrix(S)], format="csc"
        )
        lower = sp.hstack(
            [
                sp.vstack([A, G0a, sp.csc_matrix(rows4)], format="csc"),
                Zd,
            ],
            format="csc",
        )
        J = sp.vstack([upper, lower], format="csc")
        try:
            step = splu(J).solve(-F)
        except (RuntimeError, ValueError):
            return sol
        if not np.all(np.isfinite(step)):
            return sol
        z += step[:n]
        nu += step[n : n + p]
        if n_lin:
            mu_a += step[n + p : n + p + n_lin]
        if n_soc:
            lam0 += step[n + p + n_lin :]

    slack = 1e-9 * (1.0 + float(np.abs(z).max(initial=0.0)))
    if _worst_violation(program, z) > max(_worst_violation(program, sol.z), slack):
        return sol

    mu = np.zeros(program.q)
    mu[lin] = mu_a
    lambdas = []
    for i, cone in enumerate(program.cones):
        m = cone.dim
        if i in soc:
            k = int(np.where(soc == i)[0][0])
            g0, g1 = cone.residual(z)
            lam = np.concatenate([[lam0[k]], -lam0[k] * g1 / g0])
        else:
            lam = np.zeros(m)
        lambdas.append(lam)
    return replace(
        sol, z=z, nu=nu, mu=mu, lambdas=lambdas,
        obj_val=program.objective_value(z),
    )
