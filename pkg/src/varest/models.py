"""Reference dynamical models with exact derivative products.

* `heat1d_build`: periodic 1-D diffusion on [-1, 1], central-difference
  Laplacian, Crank-Nicolson or explicit RK4 time stepping.  Linear, so the
  tangent map is the propagator itself and the curvature product is zero.
* `lorenz96_build`: the cyclic quadratic-advection benchmark, RK4 in time
  with tangent/adjoint/curvature products assembled analytically through
  the integrator stages.
* `LinearModel`: any constant-matrix propagator; used by closed-form
  oracles in the tests.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, StabilityViolation
from .linalg import as_vector
from .model import Model


class LinearModel(Model):
    """x_{k+1} = P x_k for a fixed matrix P."""

    def __init__(self, propagator, num_steps, time_step=1.0):
        p = np.asarray(propagator, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise DimensionMismatch("propagator must be square")
        self.propagator = p
        self.dim = p.shape[0]
        self.num_steps = int(num_steps)
        self.time_step = float(time_step)

    def step(self, k, x):
        return self.propagator @ x

    def tlm_apply(self, k, x, dx):
        return self.propagator @ dx

    def adj_apply(self, k, x, lam):
        return self.propagator.T @ lam

    def soa_apply(self, k, x, lam, mu):
        return np.zeros(self.dim)


class PerturbedModel(Model):
    """A model with additive per-step residuals: step'(k, x) = step(k, x)
    + increments[k], where increments row k is the residual injected into
    the state at time k+1.  Residuals are state-independent, so all
    derivative products delegate to the inner model."""

    def __init__(self, inner, increments):
        increments = np.asarray(increments, dtype=float)
        if increments.shape != (inner.num_steps, inner.dim):
            raise DimensionMismatch(
                f"increments must be ({inner.num_steps}, {inner.dim}), got {increments.shape}"
            )
        self.inner = inner
        self.increments = increments
        self.dim = inner.dim
        self.num_steps = inner.num_steps
        self.time_step = inner.time_step

    def step(self, k, x):
        return np.asarray(self.inner.step(k, x), dtype=float) + self.increments[k]

    def tlm_apply(self, k, x, dx):
        return self.inner.tlm_apply(k, x, dx)

    def adj_apply(self, k, x, lam):
        return self.inner.adj_apply(k, x, lam)

    def soa_apply(self, k, x, lam, mu):
        return self.inner.soa_apply(k, x, lam, mu)


@dataclass
class Heat1dConfig:
    n: int = 50
    alpha: float = 1.0            # diffusivity; the PDE right side is alpha^2 u_xx
    dt: float = 1e-3
    num_steps: int = 100
    integrator: str = "crank_nicolson"   # or "explicit_rk4"

    @property
    def h(self):
        return 2.0 / self.n

    def grid(self):
        """Periodic grid on [-1, 1): n points, spacing 2/n."""
        return -1.0 + self.h * np.arange(self.n)


def periodic_laplacian(n, h):
    """Central-difference second-derivative matrix on a ring."""
    d2 = np.zeros((n, n))
    idx = np.arange(n)
    d2[idx, idx] = -2.0
    d2[idx, (idx + 1) % n] = 1.0
    d2[idx, (idx - 1) % n] = 1.0
    return d2 / h**2


def heat1d_build(config=None, **kwargs):
    """Build the periodic heat model; returns a LinearModel with a `config`
    and `grid` attached.

    Crank-Nicolson is unconditionally stable; the explicit RK4 path is
    guarded by alpha^2 dt / h^2 <= 0.5.
    """
    if config is None:
        config = Heat1dConfig(**kwargs)
    a = config.alpha**2 * periodic_laplacian(config.n, config.h)
    if config.integrator == "crank_nicolson":
        half = 0.5 * config.dt * a
        eye = np.eye(config.n)
        prop = np.linalg.solve(eye - half, eye + half)
    elif config.integrator == "explicit_rk4":
        ratio = config.alpha**2 * config.dt / config.h**2
        if ratio > 0.5:
            raise StabilityViolation(
                f"explicit step violates alpha^2 dt/h^2 <= 0.5 (got {ratio:.3f})"
            )
        da = config.dt * a
        prop = np.eye(config.n)
        term = np.eye(config.n)
        for j in range(1, 5):
            term = term @ da / j
            prop = prop + term
    else:
        raise DimensionMismatch(f"unknown integrator {config.integrator!r}")
    model = LinearModel(prop, config.num_steps, config.dt)
    model.config = config
    model.grid = config.grid()
    return model


@dataclass
class Lorenz96Config:
    n: int = 40
    forcing: float = 8.0
    dt: float = 0.05
    num_steps: int = 20

    def __post_init__(self):
        if self.n < 4:
            raise DimensionMismatch("cyclic neighbor indexing needs n >= 4")


def _l96_rhs(x, forcing):
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def _l96_jac_vec(x, v):
    """Jacobian of the right side at x, applied to v."""
    return (
        (np.roll(v, -1) - np.roll(v, 2)) * np.roll(x, 1)
        + (np.roll(x, -1) - np.roll(x, 2)) * np.roll(v, 1)
        - v
    )


def _l96_jac_t_vec(x, w):
    """Transposed Jacobian at x, applied to w."""
    return (
        np.roll(x, 2) * np.roll(w, 1)
        - np.roll(x, -1) * np.roll(w, -2)
        + (np.roll(x, -2) - np.roll(x, 1)) * np.roll(w, -1)
        - w
    )


def _l96_jac_t_dot(u, w):
    """State-derivative of x -> J(x)^T w, along u (x-independent: the
    right side is quadratic)."""
    return (
        np.roll(u, 2) * np.roll(w, 1)
        - np.roll(u, -1) * np.roll(w, -2)
        + (np.roll(u, -2) - np.roll(u, 1)) * np.roll(w, -1)
    )


class Lorenz96Model(Model):
    """RK4-integrated cyclic advection model with analytic derivatives."""

    def __init__(self, config):
        self.config = config
        self.dim = config.n
        self.num_steps = config.num_steps
        self.time_step = config.dt

    def _stages(self, x):
        f = self.config.forcing
        dt = self.time_step
        k1 = _l96_rhs(x, f)
        x2 = x + 0.5 * dt * k1
        k2 = _l96_rhs(x2, f)
        x3 = x + 0.5 * dt * k2
        k3 = _l96_rhs(x3, f)
        x4 = x + dt * k3
        k4 = _l96_rhs(x4, f)
        return (k1, k2, k3, k4), (x2, x3, x4)

    def step(self, k, x):
        x = as_vector(x, self.dim)
        (k1, k2, k3, k4), _ = self._stages(x)
        return x + self.time_step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    def tlm_apply(self, k, x, dx):
        x = as_vector(x, self.dim)
        dx = as_vector(dx, self.dim)
        dt = self.time_step
        _, (x2, x3, x4) = self._stages(x)
        d1 = _l96_jac_vec(x, dx)
        d2 = _l96_jac_vec(x2, dx + 0.5 * dt * d1)
        d3 = _l96_jac_vec(x3, dx + 0.5 * dt * d2)
        d4 = _l96_jac_vec(x4, dx + dt * d3)
        return dx + dt / 6.0 * (d1 + 2 * d2 + 2 * d3 + d4)

    def adj_apply(self, k, x, lam):
        x = as_vector(x, self.dim)
        lam = as_vector(lam, self.dim)
        dt = self.time_step
        _, (x2, x3, x4) = self._stages(x)
        # Reverse sweep through the RK4 stage recursion.
        d4b = dt / 6.0 * lam
        s4 = _l96_jac_t_vec(x4, d4b)
        d3b = dt / 3.0 * lam + dt * s4
        s3 = _l96_jac_t_vec(x3, d3b)
        d2b = dt / 3.0 * lam + 0.5 * dt * s3
        s2 = _l96_jac_t_vec(x2, d2b)
        d1b = dt / 6.0 * lam + 0.5 * dt * s2
        s1 = _l96_jac_t_vec(x, d1b)
        return lam + s1 + s2 + s3 + s4

    def soa_apply(self, k, x, lam, mu):
        x = as_vector(x, self.dim)
        lam = as_vector(lam, self.dim)
        mu = as_vector(mu, self.dim)
        dt = self.time_step
        _, (x2, x3, x4) = self._stages(x)
        # Stage-state tangents along mu.
        t1 = _l96_jac_vec(x, mu)
        x2d = mu + 0.5 * dt * t1
        t2 = _l96_jac_vec(x2, x2d)
        x3d = mu + 0.5 * dt * t2
        t3 = _l96_jac_vec(x3, x3d)
        x4d = mu + dt * t3
        # Forward-mode derivative of the reverse sweep.
        d4b = dt / 6.0 * lam
        s4 = _l96_jac_t_vec(x4, d4b)
        s4d = _l96_jac_t_dot(x4d, d4b)
        d3b = dt / 3.0 * lam + dt * s4
        d3bd = dt * s4d
        s3 = _l96_jac_t_vec(x3, d3b)
        s3d = _l96_jac_t_dot(x3d, d3b) + _l96_jac_t_vec(x3, d3bd)
        d2b = dt / 3.0 * lam + 0.5 * dt * s3
        d2bd = 0.5 * dt * s3d
        s2 = _l96_jac_t_vec(x2, d2b)
        s2d = _l96_jac_t_dot(x2d, d2b) + _l96_jac_t_vec(x2, d2bd)
        d1b = dt / 6.0 * lam + 0.5 * dt * s2
        d1bd = 0.5 * dt * s2d
        s1d = _l96_jac_t_dot(mu, d1b) + _l96_jac_t_vec(x, d1bd)
        return s1d + s2d + s3d + s4d


def lorenz96_build(config=None, **kwargs):
    if config is None:
        config = Lorenz96Config(**kwargs)
    return Lorenz96Model(config)
