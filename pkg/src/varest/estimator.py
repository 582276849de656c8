"""First-order a-posteriori estimation of the error that model and data
imperfections induce in a scalar quantity of interest of the analysis.

The machinery: solve the reduced-Hessian equation for a sensitivity vector
zeta, run one tangent sweep (mu) seeded with -zeta and one second-order
backward sweep (nu), then contract realized residuals against (zeta, mu,
nu) to decompose the estimated error into forward-model, adjoint-model and
optimality-equation contributions.  A probabilistic variant propagates
bias/noise statistics instead of realizations.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NotAtOptimum
from .fourdvar import kkt_residual, tlm_soa_sweep
from .linalg import as_vector, cg_solve


class QoiFunctional:
    """Scalar functional of the analysis with its gradient."""

    def __init__(self, eval_fn, grad_fn, name="qoi"):
        self._eval = eval_fn
        self._grad = grad_fn
        self.name = name

    def eval(self, theta):
        return float(self._eval(np.asarray(theta, dtype=float)))

    def grad(self, theta):
        return np.asarray(self._grad(np.asarray(theta, dtype=float)), dtype=float)

    @classmethod
    def mean_state(cls, dim):
        """Mean of the state vector."""
        w = np.full(dim, 1.0 / dim)
        return cls(lambda t: float(w @ t), lambda t: w.copy(), name="mean_state")

    @classmethod
    def component(cls, dim, index):
        """A single state component; gradient is a canonical basis vector."""
        e = np.zeros(dim)
        e[index] = 1.0
        return cls(lambda t: float(t[index]), lambda t: e.copy(), name=f"component:{index}")

    @classmethod
    def block_mean(cls, dim, start, stop):
        """Mean over the half-open component range [start, stop)."""
        if not (0 <= start < stop <= dim):
            raise DimensionMismatch("block range out of bounds")
        w = np.zeros(dim)
        w[start:stop] = 1.0 / (stop - start)
        return cls(lambda t: float(w @ t), lambda t: w.copy(), name=f"block_mean:{start}:{stop}")


@dataclass
class ImpactFactors:
    """Weights mapping optimality-system residuals to first-order changes
    in the quantity of interest.

    zeta solves the reduced-Hessian equation against the QoI gradient;
    mu is the tangent sweep seeded with -zeta; nu is the corresponding
    second-order backward sweep.
    """

    zeta: np.ndarray
    mu: np.ndarray                 # (N+1, n)
    nu: np.ndarray                 # (N+1, n)
    hessian_solve_residual: float
    method: str = "cg"


def compute_impact_factors(qoi, result, method="cg", tol=1e-8, max_iter=None,
                           gauss_newton=False):
    """Compute (zeta, mu, nu) at a converged analysis.

    method="cg" solves the Hessian equation matrix-free to relative
    residual `tol`; method="quasi_newton" applies the optimizer's
    accumulated inverse-Hessian instead (cheap, approximate).  Refuses to
    run when the optimality residual at the analysis is too large, since
    the factors are meaningless away from stationarity.

    CG failures (NonConvergence, BreakdownNegativeCurvature) propagate
    with the last iterate attached; callers may retry with
    method="quasi_newton".
    """
    context = result.context
    e_theta = qoi.grad(result.analysis)
    e_norm = float(np.linalg.norm(e_theta))

    kkt = kkt_residual(context)
    if kkt > 1e-4 * (1.0 + e_norm):
        raise NotAtOptimum(
            f"optimality residual {kkt:.3e} exceeds 1e-4*(1+|qoi grad|)", kkt_residual=kkt
        )

    n_steps = result.trajectory.num_steps
    n = context.model.dim
    if e_norm == 0.0:
        zero = np.zeros((n_steps + 1, n))
        return ImpactFactors(np.zeros(n), zero, zero.copy(), 0.0, method)

    hess = result.hess_op(gauss_newton=gauss_newton)
    if method == "cg":
        sol = cg_solve(hess, e_theta, tol=tol, max_iter=max_iter)
        zeta, residual = sol.x, sol.residual
    elif method == "quasi_newton":
        zeta = result.inv_hessian.apply(e_theta)
        residual = float(np.linalg.norm(hess.apply(zeta) - e_theta) / e_norm)
    else:
        raise DimensionMismatch(f"unknown method {method!r}")

    mu, nu = tlm_soa_sweep(context, -zeta, gauss_newton=gauss_newton)
    return ImpactFactors(zeta=zeta, mu=mu, nu=nu,
                         hessian_solve_residual=residual, method=method)


@dataclass
class ErrorBudget:
    """Decomposed first-order estimate of the QoI error with per-summand
    attribution.  total = fwd + adj + opt by construction."""

    fwd: float
    adj: float
    opt: float
    total: float
    per_time_fwd: dict = field(default_factory=dict)       # k -> contribution
    per_component_adj: dict = field(default_factory=dict)  # (k, obs index) -> contribution
    per_component_fwd: dict = field(default_factory=dict)  # (k, state index) -> contribution
    per_component_opt: dict = field(default_factory=dict)  # (k, state index) -> contribution


def _normalize_model_errors(model_errors, n_steps, dim):
    """Accept an (N, n) array (rows k=1..N) or a {k: vec} dict."""
    if model_errors is None:
        return {}
    if isinstance(model_errors, dict):
        out = {}
        for k, v in model_errors.items():
            if not 1 <= k <= n_steps:
                raise DimensionMismatch(f"model error index {k} outside 1..{n_steps}")
            out[int(k)] = as_vector(v, dim)
        return out
    arr = np.asarray(model_errors, dtype=float)
    if arr.shape != (n_steps, dim):
        raise DimensionMismatch(
            f"model errors must be shape ({n_steps}, {dim}), got {arr.shape}"
        )
    return {k: arr[k - 1] for k in range(1, n_steps + 1)}


def estimate_error_budget(factors, result, model_errors=None, data_errors=None,
                          model_error_state_jac=None):
    """Contract realized perturbations against the impact factors.

    Parameters
    ----------
    model_errors : (N, n) array or {k: vec}, optional
        Realized per-step model residuals (the amount by which the true
        evolution differs from one model step), k = 1..N.
    data_errors : {k: vec}, optional
        Realized observation errors at observed times.
    model_error_state_jac : callable, optional
        `(k, x_k, v) -> d(model residual at k+1)/dx_k applied to v`, for
        state-dependent model error.  Default None treats model error as
        state-independent, zeroing the corresponding terms.

    Returns
    -------
    ErrorBudget
        fwd = sum_k nu_k . dxhat_k;
        adj = -sum_k mu_k . (H_k^T R_k^{-1} dy_k) + state-dependence term;
        opt = -(state-dependence of the first residual against zeta);
        total = fwd + adj + opt.
    """
    context = result.context
    traj = result.trajectory
    n_steps = traj.num_steps
    dxhat = _normalize_model_errors(model_errors, n_steps, context.model.dim)
    dy = data_errors or {}

    per_component_fwd = {}
    per_time_fwd = {}
    fwd = 0.0
    for k, delta in sorted(dxhat.items()):
        terms = factors.nu[k] * delta
        s = float(terms.sum())
        per_time_fwd[k] = s
        for i, t in enumerate(terms):
            per_component_fwd[(k, i)] = float(t)
        fwd += s

    per_component_adj = {}
    adj = 0.0
    for k in context.obs.times:
        if k not in dy:
            continue
        delta = as_vector(dy[k], context.obs.op(k).out_dim)
        # mu_k . H^T R^{-1} dy = (R^{-1} H mu_k) . dy, componentwise in
        # observation space.
        w = context.obs.r(k).solve(context.obs.op(k).jac_apply(traj.states[k], factors.mu[k]))
        terms = -w * delta
        for i, t in enumerate(terms):
            per_component_adj[(k, i)] = float(t)
        adj += float(terms.sum())

    per_component_opt = {}
    opt = 0.0
    if model_error_state_jac is not None:
        for k in range(n_steps):
            jac_mu = as_vector(
                model_error_state_jac(k, traj.states[k], factors.mu[k]), context.model.dim
            )
            adj += float(jac_mu @ traj.adjoints[k + 1])
            for i, t in enumerate(jac_mu * traj.adjoints[k + 1]):
                key = (k, i)
                per_component_adj[key] = per_component_adj.get(key, 0.0) + float(t)
        jac_zeta = as_vector(
            model_error_state_jac(0, traj.states[0], factors.zeta), context.model.dim
        )
        terms = -jac_zeta * traj.adjoints[1]
        opt = float(terms.sum())
        for i, t in enumerate(terms):
            per_component_opt[(0, i)] = float(t)

    return ErrorBudget(
        fwd=fwd, adj=adj, opt=opt, total=fwd + adj + opt,
        per_time_fwd=per_time_fwd,
        per_component_adj=per_component_adj,
        per_component_fwd=per_component_fwd,
        per_component_opt=per_component_opt,
    )


def estimate_error_statistics(factors, result, model_bias=None, data_bias=None,
                              model_noise_cov=None, model_noise_cross=None,
                              data_noise_cov="obs"):
    """Mean and variance of the estimated QoI error under Gaussian error
    statistics (state-independent biases, so derivative terms drop).

    Parameters
    ----------
    model_bias : (N, n) array or {k: vec}, optional
        Per-step model error bias, k = 1..N.
    data_bias : {k: vec}, optional
        Observation error bias at observed times.
    model_noise_cov : CovMatrix or {k: CovMatrix}, optional
        Per-step model noise covariance (the block-diagonal default).
    model_noise_cross : callable, optional
        `(k, l) -> cross-covariance matrix or None` for correlated-in-time
        model noise; adds the k != l terms of the double sum.
    data_noise_cov : "obs" | None | float | {k: CovMatrix}
        Covariance of observation noise: the observation-error covariance
        itself ("obs", the standard choice), a scalar multiple of it, a
        per-time override, or None for noise-free data.

    Returns
    -------
    (mean, variance)
        mean = sum_k nu_k . beta_k - sum_k mu_k . H^T R^{-1} rho_k;
        variance = sum_{k,l} nu_k . Q_{k,l} nu_l
                 + sum_k (R^{-1} H mu_k) . C_k (R^{-1} H mu_k).
    """
    context = result.context
    traj = result.trajectory
    n_steps = traj.num_steps
    beta = _normalize_model_errors(model_bias, n_steps, context.model.dim)

    mean = 0.0
    for k, b in beta.items():
        mean += float(factors.nu[k] @ b)
    if data_bias:
        for k, rho in data_bias.items():
            if not context.obs.has(k):
                raise DimensionMismatch(f"data bias at unobserved time {k}")
            rho = as_vector(rho, context.obs.op(k).out_dim)
            w = context.obs.r(k).solve(
                context.obs.op(k).jac_apply(traj.states[k], factors.mu[k])
            )
            mean -= float(w @ rho)

    variance = 0.0
    if model_noise_cov is not None:
        for k in range(1, n_steps + 1):
            q = model_noise_cov[k] if isinstance(model_noise_cov, dict) else model_noise_cov
            variance += float(factors.nu[k] @ q.apply(factors.nu[k]))
    if model_noise_cross is not None:
        for k in range(1, n_steps + 1):
            for l in range(1, n_steps + 1):
                if k == l:
                    continue
                q_kl = model_noise_cross(k, l)
                if q_kl is not None:
                    variance += float(factors.nu[k] @ (np.asarray(q_kl) @ factors.nu[l]))

    if data_noise_cov is not None:
        for k in context.obs.times:
            w = context.obs.r(k).solve(
                context.obs.op(k).jac_apply(traj.states[k], factors.mu[k])
            )
            if data_noise_cov == "obs":
                c_w = context.obs.r(k).apply(w)
            elif isinstance(data_noise_cov, dict):
                c_w = data_noise_cov[k].apply(w)
            else:
                c_w = float(data_noise_cov) * context.obs.r(k).apply(w)
            variance += float(w @ c_w)

    return mean, variance


def posterior_covariance_column(result, index, tol=1e-8, max_iter=None):
    """One column of the inverse reduced Hessian (the a-posteriori error
    covariance under the Gaussian identification): solve H c = e_index."""
    n = result.context.model.dim
    if not 0 <= index < n:
        raise DimensionMismatch(f"column index {index} out of range 0..{n-1}")
    rhs = np.zeros(n)
    rhs[index] = 1.0
    sol = cg_solve(result.hess_op(), rhs, tol=tol, max_iter=max_iter)
    return sol.x
