"""
Random well-posed cone programs and finite-difference gradient checks.

Used by the test suite and by the CLI verify subcommand.  Programs are
rejection-sampled so that every constraint is either clearly active or
clearly inactive at the optimum (no duals or residuals inside the
thresholding band), which keeps central differences of the solver output
well defined coefficient by coefficient.
"""

import numpy as np

from .socp import ConicProgram, SocConstraint, SolverSettings, solve
from .sensitivity import (
    CoefficientPerturbation,
    ConePerturbation,
    adjoint_solve,
    apply_perturbation,
    assemble_sensitivity_system,
    extract_coefficient_gradients,
    refine_kkt_point,
)

#: solver settings for gradient checking: tighter than the defaults so the
#: finite-difference noise floor stays below the acceptance tolerance
CHECK_SETTINGS = SolverSettings(tol_feas=1e-10, tol_gap_abs=1e-10, tol_gap_rel=1e-10)


def make_random_socp(rng, n_max=8):
    """Draw one random strongly convex SOCP that is strictly feasible."""
    n = int(rng.integers(3, n_max + 1))
    p = int(rng.integers(0, min(3, n - 1) + 1))
    q = int(rng.integers(1, 5))
    n_cones = int(rng.integers(0, 4))

    L = rng.standard_normal((n, n)) * 0.6
    Q = L @ L.T + 0.5 * np.eye(n)
    c = rng.standard_normal(n)
    z0 = rng.standard_normal(n) * 0.5

    A = rng.standard_normal((p, n)) if p else np.zeros((0, n))
    b0 = A @ z0 if p else np.zeros(0)
    G0 = rng.standard_normal((q, n))
    h0 = G0 @ z0 + rng.uniform(0.05, 1.2, size=q)

    cones = []
    for _ in range(n_cones):
        m1 = int(rng.integers(1, 4))
        a = rng.standard_normal(n)
        G = rng.standard_normal((m1, n)) * 0.7
        h = rng.standard_normal(m1) * 0.3
        margin = rng.uniform(0.05, 0.8)
        b = np.linalg.norm(G @ z0 + h) + margin - a @ z0
        cones.append(SocConstraint(a=a, b=b, G=G, h=h))

    return ConicProgram(Q=Q, c=c, A=A, b0=b0, G0=G0, h0=h0, cones=cones)


def well_posed_at_optimum(program, sol, clear_band=(2e-5, 2e-3)):
    """True when no constraint sits inside the ambiguous activity band.

    Residuals and duals must be either below clear_band[0] (clearly tight /
    clearly zero) or above clear_band[1]; active cones must also stay well
    away from the vertex.
    """
    lo, hi = clear_band

    def clear(v):
        return v < lo or v > hi

    z = sol.z
    slack = program.h0 - program.G0 @ z if program.q else np.zeros(0)
    for j in range(program.q):
        if not (clear(abs(slack[j])) and clear(sol.mu[j])):
            return False
        if abs(slack[j]) < lo and sol.mu[j] < hi:
            return False  # tight with weak dual: degenerate for FD
    for i, cone in enumerate(program.cones):
        g0, g1 = cone.residual(z)
        gap = g0 - np.linalg.norm(g1)
        lam0 = sol.lambdas[i][0]
        if not (clear(abs(gap)) and clear(lam0)):
            return False
        if abs(gap) < lo and lam0 < hi:
            return False
        if abs(gap) < lo and g0 < 0.05:
            return False  # too close to the cone vertex
    return True


def sample_checkable_program(rng, n_max=8, max_tries=50):
    """Random program + Newton-polished solution passing the filter."""
    for _ in range(max_tries):
        program = make_random_socp(rng, n_max=n_max)
        sol = solve(program, CHECK_SETTINGS)
        if sol.ok and well_posed_at_optimum(program, sol):
            return program, refine_kkt_point(program, sol)
    raise RuntimeError("could not sample a well-posed random program")


def _unit_perturbations(program):
    """Yield (label, CoefficientPerturbation) for every scalar coefficient."""
    n, p, q = program.n, program.p, program.q
    for i in range(n):
        for j in range(i, n):
            dQ = np.zeros((n, n))
            dQ[i, j] += 1.0
            dQ[j, i] += 1.0  # keep the perturbed Q symmetric
            yield f"Q[{i},{j}]", CoefficientPerturbation(dQ=dQ)
    for i in range(n):
        dc = np.zeros(n)
        dc[i] = 1.0
        yield f"c[{i}]", CoefficientPerturbation(dc=dc)
    for i in range(p):
        for j in range(n):
            dA = np.zeros((p, n))
            dA[i, j] = 1.0
            yield f"A[{i},{j}]", CoefficientPerturbation(dA=dA)
    for i in range(p):
        db0 = np.zeros(p)
        db0[i] = 1.0
        yield f"b0[{i}]", CoefficientPerturbation(db0=db0)
    for i in range(q):
        for j in range(n):
            dG0 = np.zeros((q, n))
            dG0[i, j] = 1.0
            yield f"G0[{i},{j}]", CoefficientPerturbation(dG0=dG0)
    for i in range(q):
        dh0 = np.zeros(q)
        dh0[i] = 1.0
        yield f"h0[{i}]", CoefficientPerturbation(dh0=dh0)
    for ci, cone in enumerate(program.cones):
        m1 = cone.G.shape[0]
        for j in range(n):
            da = np.zeros(n)
            da[j] = 1.0
            yield f"cone{ci}.a[{j}]", CoefficientPerturbation(
                dcones={ci: ConePerturbation(da=da)}
            )
        yield f"cone{ci}.b", CoefficientPerturbation(dcones={ci: ConePerturbation(db=1.0)})
        for i in range(m1):
            for j in range(n):
                dG = np.zeros((m1, n))
                dG[i, j] = 1.0
                yield f"cone{ci}.G[{i},{j}]", CoefficientPerturbation(
                    dcones={ci: ConePerturbation(dG=dG)}
                )
        for i in range(m1):
            dh = np.zeros(m1)
            dh[i] = 1.0
            yield f"cone{ci}.h[{i}]", CoefficientPerturbation(
                dcones={ci: ConePerturbation(dh=dh)}
            )


def _gradient_entry(grads, label, program):
    """Look up the analytic gradient for a labelled unit perturbation."""
    kind, _, idx = label.partition("[")
    if label.startswith("cone"):
        ci = int(label[4 : label.index(".")])
        fieldname = label.split(".")[1].partition("[")[0]
        gc = grads.dcones[ci]
        if fieldname == "b":
            return gc["db"]
        idxs = [int(t) for t in label.split("[")[1].rstrip("]").split(",")]
        if fieldname == "a":
            return gc["da"][idxs[0]]
        if fieldname == "G":
            return gc["dG"][idxs[0], idxs[1]]
        return gc["dh"][idxs[0]]
    idxs = [int(t) for t in idx.rstrip("]").split(",")]
    if kind == "Q":
        i, j = idxs
        return grads.dQ[i, j] + grads.dQ[j, i] if i != j else 2.0 * grads.dQ[i, i]
    if kind == "c":
        return grads.dc[idxs[0]]
    if kind == "A":
        return grads.dA[idxs[0], idxs[1]]
    if kind == "b0":
        return grads.db0[idxs[0]]
    if kind == "G0":
        return grads.dG0[idxs[0], idxs[1]]
    return grads.dh0[idxs[0]]


def fd_loss(program, w, pert, step):
    """Central finite difference of w'z*(program) along a perturbation.

    Both endpoint solves are Newton-polished so the differencing noise
    floor sits at machine precision rather than at the interior-point
    termination tolerance.
    """
    prog_lo = apply_perturbation(program, pert, -step)
    prog_hi = apply_perturbation(program, pert, +step)
    lo = solve(prog_lo, CHECK_SETTINGS)
    hi = solve(prog_hi, CHECK_SETTINGS)
    if not (lo.ok and hi.ok):
        return None
    lo = refine_kkt_point(prog_lo, lo)
    hi = refine_kkt_point(prog_hi, hi)
    return (w @ hi.z - w @ lo.z) / (2.0 * step)


def gradcheck_program(program, sol, rng, step=2e-4, tol_abs=1e-5, tol_rel=1e-3):
    """Check every coefficient gradient of a random linear loss against FD.

    Returns (n_checked, failures) where failures is a list of strings
    describing coefficients whose analytic/FD mismatch exceeds
    max(tol_abs, tol_rel * |fd|).
    """
    w = rng.standard_normal(program.n)
    record = assemble_sensitivity_system(program, sol)
    adj = adjoint_solve(record, w)
    grads = extract_coefficient_gradients(record, adj)

    n_checked = 0
    failures = []
    for label, pert in _unit_perturbations(program):
        analytic = _gradient_entry(grads, label, program)
        fd = fd_loss(program, w, pert, step)
        if fd is None:
            continue  # perturbed program left the solvable region; skip
        n_checked += 1
        if abs(analytic - fd) > max(tol_abs, tol_rel * abs(fd)):
            failures.append(f"{label}: analytic {analytic:.8e} vs fd {fd:.8e}")
    return n_checked, failures
