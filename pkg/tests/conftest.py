"""Shared builders for test problems and independent oracles."""

import numpy as np
import pytest

from varest import (
    Background,
    CovMatrix,
    FiniteDimProblem,
    LinearModel,
    ObservationSet,
    heat1d_build,
    lorenz96_build,
    propagate,
)


def make_spd(rng, n, cond=10.0):
    """Random SPD matrix with prescribed condition number."""
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eigs = np.geomspace(1.0, cond, n)
    return q @ np.diag(eigs) @ q.T


def dense_reduced_hessian(propagator, obs, bg):
    """Explicit reduced Hessian for a linear model with linear operators:
    B0^{-1} + sum_k Phi_k^T H_k^T R_k^{-1} H_k Phi_k with Phi_k = P^k.

    Independent of the sweep-based implementation (plain matrix algebra).
    """
    n = propagator.shape[0]
    hess = np.linalg.inv(bg.b0.as_dense())
    phi = np.eye(n)
    for k in range(max(obs.times) + 1 if obs.times else 0):
        if obs.has(k):
            h = _dense_obs_jacobian(obs, k, n)
            hess = hess + phi.T @ h.T @ np.linalg.inv(obs.r(k).as_dense()) @ h @ phi
        phi = propagator @ phi
    return hess


def _dense_obs_jacobian(obs, k, n):
    op = obs.op(k)
    h = np.zeros((op.out_dim, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        h[:, j] = op.jac_apply(np.zeros(n), e)
        e[j] = 0.0
    return h


def normal_equations_analysis(propagator, obs, bg):
    """Closed-form 4D-Var analysis for a linear model: solve the normal
    equations assembled densely."""
    n = propagator.shape[0]
    hess = np.linalg.inv(bg.b0.as_dense())
    rhs = hess @ bg.x_b
    phi = np.eye(n)
    for k in range(max(obs.times) + 1):
        if obs.has(k):
            h = _dense_obs_jacobian(obs, k, n)
            rinv = np.linalg.inv(obs.r(k).as_dense())
            hess = hess + phi.T @ h.T @ rinv @ h @ phi
            rhs = rhs + phi.T @ h.T @ rinv @ obs.y(k)
        phi = propagator @ phi
    return np.linalg.solve(hess, rhs)


def naive_cost(x0, model, obs, bg):
    """Straight-line reimplementation of the 4D-Var cost (loop + explicit
    inverses), independent of the library's propagate/cost path."""
    x0 = np.asarray(x0, dtype=float)
    states = [x0]
    for k in range(model.num_steps):
        states.append(np.asarray(model.step(k, states[-1]), dtype=float))
    d = x0 - bg.x_b
    total = 0.5 * d @ np.linalg.solve(bg.b0.as_dense(), d)
    for k in obs.times:
        innov = obs.op(k).apply(states[k]) - obs.y(k)
        total += 0.5 * innov @ np.linalg.solve(obs.r(k).as_dense(), innov)
    return float(total)


def small_heat_problem(rng, n=20, steps=30, obs_every=6, noise=0.1, sample_noise=True):
    """Twin-experiment setup on the periodic diffusion model."""
    model = heat1d_build(n=n, dt=1e-3, num_steps=steps)
    truth = 1.0 + np.exp(-((model.grid / 0.3) ** 2))
    traj = propagate(model, truth)
    values, covs = {}, {}
    for k in range(0, steps + 1, obs_every):
        std = np.maximum(noise * np.abs(traj.states[k]), 1e-3)
        y = traj.states[k] + (std * rng.standard_normal(n) if sample_noise else 0.0)
        values[k] = y
        covs[k] = CovMatrix.diagonal(std**2)
    obs = ObservationSet.identity(n, values, covs)
    x_b = truth + 0.2 * rng.standard_normal(n)
    bg = Background(x_b=x_b, b0=CovMatrix.scaled_identity(n, 0.04))
    return model, truth, obs, bg


def small_l96_problem(rng, n=10, steps=20, obs_every=4, noise_var=0.04, sample_noise=True):
    model = lorenz96_build(n=n, dt=0.05, num_steps=steps)
    truth = 8.0 + rng.standard_normal(n)
    traj = propagate(model, truth)
    values = {}
    for k in range(0, steps + 1, obs_every):
        y = traj.states[k].copy()
        if sample_noise:
            y = y + np.sqrt(noise_var) * rng.standard_normal(n)
        values[k] = y
    obs = ObservationSet.identity(n, values, CovMatrix.scaled_identity(n, noise_var))
    bg = Background(x_b=truth + 0.3 * rng.standard_normal(n),
                    b0=CovMatrix.scaled_identity(n, 0.25))
    return model, truth, obs, bg


def random_linear_problem(rng, n=6, steps=4, spectral=0.9):
    """Stable random linear model with identity observations everywhere."""
    p = spectral * np.eye(n) + 0.3 * rng.normal(size=(n, n)) / np.sqrt(n)
    model = LinearModel(p, num_steps=steps)
    truth = rng.normal(size=n)
    traj = propagate(model, truth)
    values = {k: traj.states[k] + 0.1 * rng.standard_normal(n) for k in range(steps + 1)}
    obs = ObservationSet.identity(n, values, CovMatrix.scaled_identity(n, 0.5))
    bg = Background(x_b=rng.normal(size=n), b0=CovMatrix.scaled_identity(n, 2.0))
    return model, truth, obs, bg


def random_constrained_problem(rng, n, m, nonlinearity=0.2):
    """Random equality-constrained problem with analytic derivatives:
    c(x, th) = A x + B th + gamma * q(x) - d  (q_i = x^T Q_i x / 2),
    J = quadratic, strictly convex.  Feasible at (x_feas, 0).

    Returns (problem, theta0, x_feasible).
    """
    a = np.eye(n) + 0.3 * rng.normal(size=(n, n)) / np.sqrt(n)
    b = rng.normal(size=(n, m)) / np.sqrt(m)
    quads = [0.5 * (s + s.T) for s in rng.normal(size=(n, n, n)) / n]
    x_star = rng.normal(size=n)
    t_star = rng.normal(size=m)
    x_feas = 0.1 * rng.normal(size=n)
    gamma = float(nonlinearity)

    def q(x):
        return np.array([0.5 * x @ (qi @ x) for qi in quads])

    d = a @ x_feas + gamma * q(x_feas)

    def c(x, t):
        return a @ x + b @ t + gamma * q(x) - d

    def j(x, t):
        return 0.5 * (x - x_star) @ (x - x_star) + 0.5 * (t - t_star) @ (t - t_star)

    problem = FiniteDimProblem(
        c, j, n, m,
        c_x=lambda x, t: a + gamma * np.array([qi @ x for qi in quads]),
        c_theta=lambda x, t: b,
        j_x=lambda x, t: x - x_star,
        j_theta=lambda x, t: t - t_star,
        j_xx=lambda x, t: np.eye(n),
        j_xtheta=lambda x, t: np.zeros((n, m)),
        j_thetatheta=lambda x, t: np.eye(m),
        lam_c_xx=lambda x, t, lam: gamma * sum(li * qi for li, qi in zip(lam, quads)),
        lam_c_xtheta=lambda x, t, lam: np.zeros((n, m)),
        lam_c_thetatheta=lambda x, t, lam: np.zeros((m, m)),
    )
    return problem, np.zeros(m), x_feas


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
