"""
Second-order cone programs with explicit coefficient structure.

A program is stored in the form

    minimize    1/2 z'Qz + c'z
    subject to  A z = b0
                G0 z <= h0
                g_i = [a_i'z + b_i; G_i z + h_i]  in  SOC(m_i),  i = 1..n_soc

where SOC(m) = {g in R^m : g[0] >= ||g[1:]||}.  Every coefficient is kept
separately addressable because downstream sensitivity code needs gradients
with respect to each of them.

Dual variables follow the Lagrangian

    L = 1/2 z'Qz + c'z + nu'(Az - b0) + mu'(G0 z - h0) - sum_i lam_i'g_i

with mu >= 0 and lam_i in SOC(m_i), so stationarity reads

    Qz + c + A'nu + G0'mu - sum_i (a_i lam_i0 + G_i'lam_i1) = 0.

The backend solver is Clarabel, whose dual convention matches this sign
choice one-to-one (no translation beyond row bookkeeping is needed).
"""

import enum
import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

try:
    import clarabel
except ImportError:  # pragma: no cover - backend is a hard dependency
    clarabel = None

SCHEMA_VERSION = 1


def _as_csc(M, shape=None):
    """Convert array-like or sparse input to csc_matrix with float64 data."""
    if M is None:
        if shape is None:
            raise ValueError("shape required for empty matrix")
        return sp.csc_matrix(shape, dtype=float)
    if sp.issparse(M):
        out = M.tocsc().astype(float)
    else:
        out = sp.csc_matrix(np.atleast_2d(np.asarray(M, dtype=float)))
    if shape is not None and out.shape != tuple(shape):
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    return out


def _as_vec(v, n=None):
    out = np.atleast_1d(np.asarray(v, dtype=float)).ravel()
    if n is not None and out.size != n:
        raise ValueError(f"expected vector of length {n}, got {out.size}")
    return out


@dataclass
class SocConstraint:
    """One second-order cone row block: [a'z + b; G z + h] in SOC(1 + rows(G))."""

    a: np.ndarray
    b: float
    G: sp.csc_matrix
    h: np.ndarray

    def __post_init__(self):
        self.a = _as_vec(self.a)
        self.G = _as_csc(self.G)
        self.h = _as_vec(self.h)
        self.b = float(self.b)

    @property
    def dim(self):
        """Cone dimension m = 1 + rows(G)."""
        return 1 + self.G.shape[0]

    def residual(self, z):
        """Return (g0, g1) = (a'z + b, Gz + h) at the point z."""
        g0 = float(self.a @ z + self.b)
        g1 = self.G @ z + self.h
        return g0, g1


@dataclass
class ConicProgram:
    """Quadratic-objective SOCP with individually addressable coefficients."""

    Q: sp.csc_matrix
    c: np.ndarray
    A: sp.csc_matrix
    b0: np.ndarray
    G0: sp.csc_matrix
    h0: np.ndarray
    cones: list = field(default_factory=list)

    def __post_init__(self):
        self.c = _as_vec(self.c)
        n = self.c.size
        self.Q = _as_csc(self.Q, (n, n)) if self.Q is not None else _as_csc(None, (n, n))
        self.A = _as_csc(self.A, None) if self.A is not None else _as_csc(None, (0, n))
        self.G0 = _as_csc(self.G0, None) if self.G0 is not None else _as_csc(None, (0, n))
        self.b0 = _as_vec(self.b0, self.A.shape[0]) if self.b0 is not None else np.zeros(0)
        self.h0 = _as_vec(self.h0, self.G0.shape[0]) if self.h0 is not None else np.zeros(0)

    @property
    def n(self):
        return self.c.size

    @property
    def p(self):
        return self.A.shape[0]

    @property
    def q(self):
        return self.G0.shape[0]

    def objective_value(self, z):
        return float(0.5 * z @ (self.Q @ z) + self.c @ z)


class SolverStatus(enum.Enum):
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    MAX_ITERATIONS = "max_iterations"
    NUMERICAL_FAILURE = "numerical_failure"

    @property
    def ok(self):
        return self is SolverStatus.OPTIMAL


@dataclass
class PrimalDualSolution:
    """Primal point plus duals in the module's Lagrangian sign convention."""

    status: SolverStatus
    z: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    lambdas: list
    obj_val: float
    solve_time: float
    iterations: int
    stationarity: float
    raw_status: str = ""

    @property
    def ok(self):
        return self.status.ok


@dataclass
class SolverSettings:
    # Tolerances are set well below the active-set detection thresholds:
    # at the stock 1e-8 the interior-point iterate can hover ~1e-7 off a
    # constraint boundary on badly scaled programs, which misclassifies
    # active sets and silently corrupts every downstream derivative.  An
    # instance the backend cannot push that far stalls (AlmostSolved), so
    # failed attempts are retried with 10x looser tolerances up to
    # tol_relax_retries times before the failure is reported.
    tol_feas: float = 1e-10
    tol_gap_abs: float = 1e-10
    tol_gap_rel: float = 1e-10
    max_iter: int = 200
    verbose: bool = False
    stationarity_tol: float = 1e-6
    tol_relax_retries: int = 2


def validate(program):
    """Check a ConicProgram for structural problems.

    Returns a list of violation strings; an empty list means the program is
    well formed.  Checked: dimension agreement of every block, symmetry of Q,
    finiteness of all entries, and minimum cone dimension 2.
    """
    issues = []
    n = program.n
    if program.Q.shape != (n, n):
        issues.append(f"Q shape {program.Q.shape} != ({n}, {n})")
    else:
        sym_gap = abs(program.Q - program.Q.T).max() if program.Q.nnz else 0.0
        if sym_gap > 1e-10 * (1.0 + abs(program.Q).max()):
            issues.append(f"Q not symmetric (gap {sym_gap:.3e})")
    if program.A.shape[1] != n:
        issues.append(f"A has {program.A.shape[1]} columns, expected {n}")
    if program.b0.size != program.A.shape[0]:
        issues.append(f"b0 length {program.b0.size} != rows(A) {program.A.shape[0]}")
    if program.G0.shape[1] != n:
        issues.append(f"G0 has {program.G0.shape[1]} columns, expected {n}")
    if program.h0.size != program.G0.shape[0]:
        issues.append(f"h0 length {program.h0.size} != rows(G0) {program.G0.shape[0]}")
    for mat, name in ((program.Q, "Q"), (program.A, "A"), (program.G0, "G0")):
        if mat.nnz and not np.isfinite(mat.data).all():
            issues.append(f"{name} has non-finite entries")
    for vec, name in ((program.c, "c"), (program.b0, "b0"), (program.h0, "h0")):
        if vec.size and not np.isfinite(vec).all():
            issues.append(f"{name} has non-finite entries")
    for i, cone in enumerate(program.cones):
        if cone.a.size != n:
            issues.append(f"cone {i}: a length {cone.a.size} != {n}")
        if cone.G.shape[1] != n:
            issues.append(f"cone {i}: G has {cone.G.shape[1]} columns, expected {n}")
        if cone.h.size != cone.G.shape[0]:
            issues.append(f"cone {i}: h length {cone.h.size} != rows(G) {cone.G.shape[0]}")
        if cone.dim < 2:
            issues.append(f"cone {i}: dimension {cone.dim} < 2")
        finite = (
            np.isfinite(cone.a).all()
            and np.isfinite(cone.b)
            and np.isfinite(cone.h).all()
            and (not cone.G.nnz or np.isfinite(cone.G.data).all())
        )
        if not finite:
            issues.append(f"cone {i}: non-finite entries")
    return issues


def stationarity_residual(program, z, nu, mu, lambdas):
    """Infinity norm of grad_z L, normalized by the largest term magnitude."""
    r = program.Q @ z + program.c
    terms = [np.abs(program.Q @ z).max(initial=0.0), np.abs(program.c).max(initial=0.0)]
    if program.p:
        t = program.A.T @ nu
        r = r + t
        terms.append(np.abs(t).max(initial=0.0))
    if program.q:
        t = program.G0.T @ mu
        r = r + t
        terms.append(np.abs(t).max(initial=0.0))
    for cone, lam in zip(program.cones, lambdas):
        t = cone.a * lam[0] + cone.G.T @ lam[1:]
        r = r - t
        terms.append(np.abs(t).max(initial=0.0))
    scale = 1.0 + max(terms)
    return float(np.abs(r).max(initial=0.0) / scale)


_CLARABEL_STATUS = {
    "Solved": SolverStatus.OPTIMAL,
    "PrimalInfeasible": SolverStatus.PRIMAL_INFEASIBLE,
    "AlmostPrimalInfeasible": SolverStatus.PRIMAL_INFEASIBLE,
    "DualInfeasible": SolverStatus.DUAL_INFEASIBLE,
    "AlmostDualInfeasible": SolverStatus.DUAL_INFEASIBLE,
    "MaxIterations": SolverStatus.MAX_ITERATIONS,
    "MaxTime": SolverStatus.MAX_ITERATIONS,
}


def solve(program, settings=None):
    """Solve a ConicProgram with the interior-point backend.

    Returns a PrimalDualSolution whose duals satisfy the module Lagrangian
    convention.  On OPTIMAL the stationarity residual has been checked
    against settings.stationarity_tol; a violation downgrades the status to
    NUMERICAL_FAILURE rather than returning silently inconsistent duals.
    Numerical failures and iteration limits are retried at progressively
    looser tolerances (see SolverSettings); infeasibility verdicts are
    final and returned immediately.
    """
    from dataclasses import replace as _replace

    if settings is None:
        settings = SolverSettings()
    sol = _solve_once(program, settings)
    relax = 1.0
    for _ in range(settings.tol_relax_retries):
        if sol.status not in (
            SolverStatus.NUMERICAL_FAILURE,
            SolverStatus.MAX_ITERATIONS,
        ):
            break
        relax *= 10.0
        retry = _replace(
            settings,
            tol_feas=settings.tol_feas * relax,
            tol_gap_abs=settings.tol_gap_abs * relax,
            tol_gap_rel=settings.tol_gap_rel * relax,
        )
        attempt = _solve_once(program, retry)
        attempt.raw_status += f" (tolerances relaxed {relax:.0e}x)"
        sol = attempt if attempt.ok else sol
    return sol


def _solve_once(program, settings):
    if clarabel is None:  # pragma: no cover
        raise RuntimeError("clarabel backend is not available")
    issues = validate(program)
    if issues:
        raise ValueError("invalid program: " + "; ".join(issues))

    n, p, q = program.n, program.p, program.q
    rows = [program.A, program.G0]
    rhs = [program.b0, program.h0]
    cone_spec = []
    if p:
        cone_spec.append(clarabel.ZeroConeT(p))
    if q:
        cone_spec.append(clarabel.NonnegativeConeT(q))
    for cone in program.cones:
        # slack s = rhs - rows.z must equal [a'z + b; Gz + h]
        rows.append(sp.vstack([-sp.csc_matrix(cone.a), -cone.G], format="csc"))
        rhs.append(np.concatenate([[cone.b], cone.h]))
        cone_spec.append(clarabel.SecondOrderConeT(cone.dim))
    A_clar = sp.vstack(rows, format="csc") if rows else sp.csc_matrix((0, n))
    b_clar = np.concatenate(rhs) if rhs else np.zeros(0)

    cfg = clarabel.DefaultSettings()
    cfg.verbose = settings.verbose
    cfg.max_iter = settings.max_iter
    cfg.tol_feas = settings.tol_feas
    cfg.tol_gap_abs = settings.tol_gap_abs
    cfg.tol_gap_rel = settings.tol_gap_rel

    t0 = time.perf_counter()
    try:
        solver = clarabel.DefaultSolver(
            sp.triu(program.Q, format="csc"), program.c, A_clar, b_clar, cone_spec, cfg
        )
        sol = solver.solve()
    except BaseException as exc:  # backend panics surface as generic exceptions
        return PrimalDualSolution(
            status=SolverStatus.NUMERICAL_FAILURE,
            z=np.full(n, np.nan),
            nu=np.zeros(p),
            mu=np.zeros(q),
            lambdas=[np.zeros(c.dim) for c in program.cones],
            obj_val=np.nan,
            solve_time=time.perf_counter() - t0,
            iterations=0,
            stationarity=np.inf,
            raw_status=f"exception: {exc}",
        )
    elapsed = time.perf_counter() - t0

    raw = str(sol.status)
    status = _CLARABEL_STATUS.get(raw, SolverStatus.NUMERICAL_FAILURE)
    z = np.asarray(sol.x, dtype=float)
    zdual = np.asarray(sol.z, dtype=float)
    nu = zdual[:p]
    mu = zdual[p : p + q]
    lambdas = []
    off = p + q
    for cone in program.cones:
        lambdas.append(zdual[off : off + cone.dim].copy())
        off += cone.dim

    stat = np.inf
    if status is SolverStatus.OPTIMAL:
        stat = stationarity_residual(program, z, nu, mu, lambdas)
        if not np.isfinite(stat) or stat > settings.stationarity_tol:
            status = SolverStatus.NUMERICAL_FAILURE
            raw += f" (stationarity {stat:.3e})"

    return PrimalDualSolution(
        status=status,
        z=z,
        nu=nu,
        mu=mu,
        lambdas=lambdas,
        obj_val=float(sol.obj_val),
        solve_time=elapsed,
        iterations=int(sol.iterations),
        stationarity=stat,
        raw_status=raw,
    )


def _matrix_to_json(M):
    M = M.tocoo()
    return {
        "rows": int(M.shape[0]),
        "cols": int(M.shape[1]),
        "triplets": [[int(i), int(j), float(v)] for i, j, v in zip(M.row, M.col, M.data)],
    }


def _matrix_from_json(d):
    trip = d["triplets"]
    if trip:
        i, j, v = zip(*trip)
    else:
        i, j, v = [], [], []
    return sp.csc_matrix((v, (i, j)), shape=(d["rows"], d["cols"]))


def program_to_dict(program):
    """JSON-ready dict for a ConicProgram (sparse triplet encoding)."""
    return {
        "schema_version": SCHEMA_VERSION,
        "n": program.n,
        "Q": _matrix_to_json(program.Q),
        "c": program.c.tolist(),
        "A": _matrix_to_json(program.A),
        "b0": program.b0.tolist(),
        "G0": _matrix_to_json(program.G0),
        "h0": program.h0.tolist(),
        "cones": [
            {
                "a": cone.a.tolist(),
                "b": cone.b,
                "G": _matrix_to_json(cone.G),
                "h": cone.h.tolist(),
            }
            for cone in program.cones
        ],
    }


def program_from_dict(d):
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {d.get('schema_version')!r}")
    cones = [
        SocConstraint(
            a=np.asarray(cd["a"], dtype=float),
            b=cd["b"],
            G=_matrix_from_json(cd["G"]),
            h=np.asarray(cd["h"], dtype=float),
        )
        for cd in d["cones"]
    ]
    return ConicProgram(
        Q=_matrix_from_json(d["Q"]),
        c=np.asarray(d["c"], dtype=float),
        A=_matrix_from_json(d["A"]),
        b0=np.asarray(d["b0"], dtype=float),
        G0=_matrix_from_json(d["G0"]),
        h0=np.asarray(d["h0"], dtype=float),
        cones=cones,
    )


def program_to_json(program, path=None):
    """Serialize to a JSON string, optionally writing it to path."""
    text = json.dumps(program_to_dict(program))
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def program_from_json(source):
    """Load a program from a JSON string or a file path."""
    if isinstance(source, str) and source.lstrip().startswith("{"):
        text = source
    else:
        with open(source) as fh:
            text = fh.read()
    return program_from_dict(json.loads(text))
