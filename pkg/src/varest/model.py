"""Contract for discrete-time dynamical models and derivative products.

A model advances the state one step at a time and exposes four derivative
products around a base state: the step Jacobian applied to a direction
(`tlm_apply`), its transpose applied to a costate (`adj_apply`), and the
derivative of the transposed-Jacobian product with respect to the state
(`soa_apply`), which is what second-order sweeps need.  A finite-difference
wrapper supplies all three for models that only provide `step`.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, DimensionTooLarge, NonFiniteState
from .linalg import as_vector, default_fd_step

FD_JACOBIAN_DIM_LIMIT = 64


class Model:
    """Base class for discrete-time models.

    Subclasses must set `dim`, `num_steps`, `time_step` and implement
    `step`.  Derivative products default to NotImplementedError; use
    `fd_fallback_wrap` to synthesize them when analytic forms are
    unavailable.  Implementations must be pure functions of (k, inputs)
    so instances can be shared freely.
    """

    dim = None
    num_steps = None
    time_step = None

    def step(self, k, x):
        """Advance the state from time index k to k+1."""
        raise NotImplementedError

    def tlm_apply(self, k, x, dx):
        """Step Jacobian at (k, x) applied to dx."""
        raise NotImplementedError

    def adj_apply(self, k, x, lam):
        """Transposed step Jacobian at (k, x) applied to lam."""
        raise NotImplementedError

    def soa_apply(self, k, x, lam, mu):
        """Directional state-derivative of `adj_apply` along mu.

        Returns d/de adj_apply(k, x + e*mu, lam) at e=0, i.e. the
        second-derivative contraction of the step map with lam, applied
        to mu (a symmetric bilinear form, so no transpose ambiguity).
        """
        raise NotImplementedError

    def param_jac_apply(self, k, x, dparam):
        """Derivative of the step map with respect to external parameters.

        Identically zero here: the initial state is the only control in
        this package, entering through the initial condition alone.  The
        hook is kept so estimator sweeps state their full recursions.
        """
        return np.zeros(self.dim)


@dataclass
class Trajectory:
    """States x_0..x_N of one model run, optionally with the costate
    sequence lambda_0..lambda_N from an adjoint sweep."""

    states: np.ndarray            # shape (N+1, n)
    adjoints: np.ndarray | None = None
    time_step: float = 1.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2:
            raise DimensionMismatch("states must be a (N+1, n) array")
        if self.adjoints is not None:
            self.adjoints = np.asarray(self.adjoints, dtype=float)
            if self.adjoints.shape != self.states.shape:
                raise DimensionMismatch("adjoints shape must match states")

    @property
    def num_steps(self):
        return self.states.shape[0] - 1

    @property
    def dim(self):
        return self.states.shape[1]


def propagate(model, x0):
    """Run the model forward from x0 and collect the full trajectory.

    Raises NonFiniteState (reporting the step index) if the model blows up.
    """
    x0 = as_vector(x0, model.dim)
    states = np.empty((model.num_steps + 1, model.dim))
    states[0] = x0
    # Overflow inside a step surfaces as NonFiniteState, not a warning.
    with np.errstate(all="ignore"):
        for k in range(model.num_steps):
            nxt = np.asarray(model.step(k, states[k]), dtype=float)
            if not np.all(np.isfinite(nxt)):
                raise NonFiniteState(k)
            states[k + 1] = nxt
    return Trajectory(states=states, time_step=model.time_step)


class _FdWrappedModel(Model):
    """Synthesizes tlm/adj/soa from `step` by central differences.

    The adjoint requires assembling the full step Jacobian, so it is
    refused for dim > FD_JACOBIAN_DIM_LIMIT.  Meant as an oracle and a
    convenience for small models, not a production path.
    """

    def __init__(self, inner):
        self.inner = inner
        self.dim = inner.dim
        self.num_steps = inner.num_steps
        self.time_step = inner.time_step
        self._jac_cache = {}

    def step(self, k, x):
        return self.inner.step(k, x)

    def tlm_apply(self, k, x, dx):
        x = as_vector(x, self.dim)
        dx = as_vector(dx, self.dim)
        h = default_fd_step(x)
        fp = np.asarray(self.inner.step(k, x + h * dx), dtype=float)
        fm = np.asarray(self.inner.step(k, x - h * dx), dtype=float)
        return (fp - fm) / (2.0 * h)

    def _jacobian(self, k, x):
        if self.dim > FD_JACOBIAN_DIM_LIMIT:
            raise DimensionTooLarge(
                f"FD Jacobian assembly refused for dim {self.dim} > {FD_JACOBIAN_DIM_LIMIT}"
            )
        key = (k, x.tobytes())
        if key in self._jac_cache:
            return self._jac_cache[key]
        h = default_fd_step(x)
        jac = np.empty((self.dim, self.dim))
        e = np.zeros(self.dim)
        for j in range(self.dim):
            e[j] = h
            fp = np.asarray(self.inner.step(k, x + e), dtype=float)
            fm = np.asarray(self.inner.step(k, x - e), dtype=float)
            jac[:, j] = (fp - fm) / (2.0 * h)
            e[j] = 0.0
        if len(self._jac_cache) > 8:
            self._jac_cache.clear()
        self._jac_cache[key] = jac
        return jac

    def adj_apply(self, k, x, lam):
        x = as_vector(x, self.dim)
        lam = as_vector(lam, self.dim)
        return self._jacobian(k, x).T @ lam

    def soa_apply(self, k, x, lam, mu):
        x = as_vector(x, self.dim)
        mu = as_vector(mu, self.dim)
        h = default_fd_step(x)
        ap = self.adj_apply(k, x + h * mu, lam)
        am = self.adj_apply(k, x - h * mu, lam)
        return (ap - am) / (2.0 * h)


def fd_fallback_wrap(model):
    """Wrap a step-only model with finite-difference derivative products."""
    if model.dim is None or model.num_steps is None:
        raise DimensionMismatch("model must define dim and num_steps")
    return _FdWrappedModel(model)


def duality_gap(model, k, x, dx, lam):
    """Relative mismatch between <M dx, lam> and <dx, M^T lam>."""
    lhs = float(model.tlm_apply(k, x, dx) @ lam)
    rhs = float(dx @ model.adj_apply(k, x, lam))
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return abs(lhs - rhs) / scale


def richardson_slope(residual_at, epsilons=(1e-2, 1e-3, 1e-4, 1e-5)):
    """Log-log slope of a remainder-vs-epsilon curve.

    `residual_at(eps)` should return the norm of a first-order remainder
    (already divided by eps); a correct linearization gives slope ~1.
    """
    eps = np.asarray(epsilons, dtype=float)
    res = np.array([float(residual_at(e)) for e in eps])
    if np.any(res <= 0):
        res = np.maximum(res, 1e-300)
    return float(np.polyfit(np.log(eps), np.log(res), 1)[0])


def tlm_consistency_residual(model, k, x, dx, eps):
    """|| (step(x + eps dx) - step(x)) / eps - tlm(dx) ||, O(eps) for a
    correct tangent linearization."""
    fp = np.asarray(model.step(k, x + eps * dx), dtype=float)
    f0 = np.asarray(model.step(k, x), dtype=float)
    return float(np.linalg.norm((fp - f0) / eps - model.tlm_apply(k, x, dx)))


def soa_consistency_residual(model, k, x, lam, mu, eps):
    """|| (adj(x + eps mu) - adj(x)) / eps - soa(lam, mu) ||, O(eps)."""
    ap = np.asarray(model.adj_apply(k, x + eps * mu, lam), dtype=float)
    a0 = np.asarray(model.adj_apply(k, x, lam), dtype=float)
    return float(np.linalg.norm((ap - a0) / eps - model.soa_apply(k, x, lam, mu)))
