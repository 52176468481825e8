"""
Code generation for continuous-time dynamics and their derivatives.

Trajectory problems supply their vector field once, symbolically; this module
compiles vectorized numpy callables for the field itself, its state/control
Jacobians, the full second-derivative tensor, and derivatives with respect to
named scalar parameters.  The second derivatives feed the reverse pass:
gradients of subproblem coefficients (which contain Jacobian entries) with
respect to the reference trajectory are contractions of these tensors.

All evaluators take states X of shape (nx, N) and controls U of shape
(nu, N) (1-d inputs are treated as a single node) and return arrays with a
trailing node axis.

A plain RK4 integrator with linear control interpolation, plus its forward
parameter sensitivity, lives here as well; both the open-loop reference
generation and the physical replay validation use it.
"""

import numpy as np
import sympy as sym


class DynamicsModel:
    """Compiled derivatives of a symbolic vector field xdot = f(x, u; theta).

    Parameters
    ----------
    x_syms, u_syms : sequences of sympy symbols for states and controls.
    f_exprs : sequence of sympy expressions, one per state.
    param_syms : optional dict name -> sympy symbol for scalar parameters
        appearing in f_exprs.
    """

    def __init__(self, x_syms, u_syms, f_exprs, param_syms=None):
        self.x_syms = list(x_syms)
        self.u_syms = list(u_syms)
        self.f_exprs = list(f_exprs)
        self.param_syms = dict(param_syms or {})
        self.nx = len(self.x_syms)
        self.nu = len(self.u_syms)
        self.nw = self.nx + self.nu
        self._w_syms = self.x_syms + self.u_syms
        self._args = self._w_syms + list(self.param_syms.values())
        self._param_order = list(self.param_syms.keys())

        self._jac_exprs = None
        self._val_fn = self._compile(self.f_exprs)
        self._jac_fn = None
        self._hess_fn = None
        self._dparam_fn = {}
        self._djac_fn = {}

    # -- compilation ------------------------------------------------------

    def _compile(self, exprs):
        fn = sym.lambdify(self._args, list(exprs), modules="numpy", cse=True)
        n_out = len(exprs)

        def call(X, U, params):
            X = np.asarray(X, dtype=float)
            U = np.asarray(U, dtype=float)
            single = X.ndim == 1
            if single:
                X = X[:, None]
                U = U[:, None]
            N = X.shape[1]
            pvals = [params[name] for name in self._param_order] if self._param_order else []
            vals = fn(*X, *U, *pvals)
            out = np.empty((n_out, N))
            for i, v in enumerate(vals):
                out[i] = v  # scalars broadcast across nodes
            return out[:, 0] if single else out

        return call

    def _jacobian_exprs(self):
        if self._jac_exprs is None:
            self._jac_exprs = [
                [sym.diff(f, w) for w in self._w_syms] for f in self.f_exprs
            ]
        return self._jac_exprs

    # -- evaluation -------------------------------------------------------

    def f(self, X, U, params=None):
        """Vector field, shape (nx, N)."""
        return self._val_fn(X, U, params or {})

    def jacobian(self, X, U, params=None):
        """d f / d (x, u), shape (nx, nx + nu, N)."""
        if self._jac_fn is None:
            flat = [e for row in self._jacobian_exprs() for e in row]
            self._jac_fn = self._compile(flat)
        out = self._jac_fn(X, U, params or {})
        lead = out.shape[1:]  # () for single node, (N,) otherwise
        return out.reshape((self.nx, self.nw) + lead)

    def jac_x(self, X, U, params=None):
        return self.jacobian(X, U, params)[:, : self.nx]

    def jac_u(self, X, U, params=None):
        return self.jacobian(X, U, params)[:, self.nx :]

    def hessian(self, X, U, params=None):
        """d2 f / d(x,u)^2, shape (nx, nx + nu, nx + nu, N)."""
        if self._hess_fn is None:
            jac = self._jacobian_exprs()
            flat = [
                sym.diff(jac[i][a], self._w_syms[b])
                for i in range(self.nx)
                for a in range(self.nw)
                for b in range(self.nw)
            ]
            self._hess_fn = self._compile(flat)
        out = self._hess_fn(X, U, params or {})
        lead = out.shape[1:]
        return out.reshape((self.nx, self.nw, self.nw) + lead)

    def d_param(self, name, X, U, params=None):
        """d f / d theta_name, shape (nx, N)."""
        if name not in self._dparam_fn:
            s = self.param_syms[name]
            self._dparam_fn[name] = self._compile(
                [sym.diff(f, s) for f in self.f_exprs]
            )
        return self._dparam_fn[name](X, U, params or {})

    def d_param_jacobian(self, name, X, U, params=None):
        """d (df/d(x,u)) / d theta_name, shape (nx, nx + nu, N)."""
        if name not in self._djac_fn:
            s = self.param_syms[name]
            flat = [
                sym.diff(e, s) for row in self._jacobian_exprs() for e in row
            ]
            self._djac_fn[name] = self._compile(flat)
        out = self._djac_fn[name](X, U, params or {})
        lead = out.shape[1:]
        return out.reshape((self.nx, self.nw) + lead)


def _node_controls(U, n, tau):
    """Linear interpolation between node controls n and n+1 at fraction tau."""
    return (1.0 - tau) * U[:, n] + tau * U[:, n + 1]


def rk4_trajectory(model, x0, U, dt, params=None, substeps=1):
    """Integrate the field across N intervals with interpolated node controls.

    U has shape (nu, N + 1); the control is piecewise linear between nodes.
    Returns the state trajectory X of shape (nx, N + 1).
    """
    params = params or {}
    N = U.shape[1] - 1
    X = np.empty((model.nx, N + 1))
    X[:, 0] = x0
    h = dt / substeps
    for n in range(N):
        x = X[:, n].copy()
        for s in range(substeps):
            t0 = (s / substeps)
            u1 = _node_controls(U, n, t0)
            u2 = _node_controls(U, n, t0 + 0.5 / substeps)
            u4 = _node_controls(U, n, t0 + 1.0 / substeps)
            k1 = model.f(x, u1, params)
            k2 = model.f(x + 0.5 * h * k1, u2, params)
            k3 = model.f(x + 0.5 * h * k2, u2, params)
            k4 = model.f(x + h * k3, u4, params)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        X[:, n + 1] = x
    return X


def rk4_trajectory_with_param_tangent(model, x0, U, dt, name, params,
                                      dx0=None, substeps=1):
    """RK4 trajectory plus its exact forward sensitivity to one parameter.

    Differentiates the integrator itself: each stage tangent combines the
    state Jacobian with the direct parameter derivative of the field, so the
    returned dX/dtheta is the derivative of exactly what rk4_trajectory
    computes (controls held fixed).  Returns (X, dX) both (nx, N + 1).
    """
    N = U.shape[1] - 1
    X = np.empty((model.nx, N + 1))
    dX = np.empty((model.nx, N + 1))
    X[:, 0] = x0
    dX[:, 0] = 0.0 if dx0 is None else dx0
    h = dt / substeps

    def stage(x, dx, u):
        k = model.f(x, u, params)
        J = model.jac_x(x, u, params)
        dk = J @ dx + model.d_param(name, x, u, params)
        return k, dk

    for n in range(N):
        x = X[:, n].copy()
        dx = dX[:, n].copy()
        for s in range(substeps):
            t0 = (s / substeps)
            u1 = _node_controls(U, n, t0)
            u2 = _node_controls(U, n, t0 + 0.5 / substeps)
            u4 = _node_controls(U, n, t0 + 1.0 / substeps)
            k1, dk1 = stage(x, dx, u1)
            k2, dk2 = stage(x + 0.5 * h * k1, dx + 0.5 * h * dk1, u2)
            k3, dk3 = stage(x + 0.5 * h * k2, dx + 0.5 * h * dk2, u2)
            k4, dk4 = stage(x + h * k3, dx + h * dk3, u4)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            dx = dx + (h / 6.0) * (dk1 + 2 * dk2 + 2 * dk3 + dk4)
        X[:, n + 1] = x
        dX[:, n + 1] = dx
    return X, dX
