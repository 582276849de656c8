"""Dense vector/matrix kernel: matrix-free CG, limited-memory BFGS with a
strong-Wolfe line search, covariance containers, and finite-difference
derivative checks.

Vectors are plain 1-D float64 numpy arrays throughout the package.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BreakdownNegativeCurvature,
    DimensionMismatch,
    LineSearchFailure,
    NonConvergence,
    NotPSD,
)

_EPS = np.finfo(float).eps


def as_vector(x, dim=None):
    """Coerce to a finite 1-D float64 array, optionally checking length."""
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        v = v.reshape(-1)
    if dim is not None and v.size != dim:
        raise DimensionMismatch(f"expected vector of length {dim}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise DimensionMismatch("vector contains NaN/Inf")
    return v


class SymOp:
    """Matrix-free symmetric linear operator on R^dim.

    Wraps a callable `apply: vec -> vec`.  Symmetry is a contract on the
    callable, checked by the test suite via random inner products.
    """

    def __init__(self, apply, dim):
        self._apply = apply
        self.dim = int(dim)

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise DimensionMismatch(f"operator dim {self.dim}, vector shape {v.shape}")
        out = np.asarray(self._apply(v), dtype=float)
        if out.shape != (self.dim,):
            raise DimensionMismatch("operator returned wrong shape")
        return out

    def __call__(self, v):
        return self.apply(v)

    @classmethod
    def from_matrix(cls, a):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch("from_matrix needs a square matrix")
        return cls(lambda v: a @ v, a.shape[0])

    @classmethod
    def identity(cls, n):
        return cls(lambda v: v.copy(), n)

    def as_matrix(self):
        """Densify by application to basis vectors (small dims only)."""
        n = self.dim
        cols = np.empty((n, n))
        e = np.zeros(n)
        for j in range(n):
            e[j] = 1.0
            cols[:, j] = self.apply(e)
            e[j] = 0.0
        return cols


class CovMatrix:
    """Symmetric positive semidefinite covariance, diagonal or dense.

    `solve` requires strict positive definiteness; `sqrt_apply` maps a
    standard-normal draw z to a sample with this covariance (L z with
    C = L L^T), tolerating semidefiniteness via an eigenvalue factor.
    """

    def __init__(self, diag=None, dense=None):
        if (diag is None) == (dense is None):
            raise DimensionMismatch("provide exactly one of diag / dense")
        if diag is not None:
            d = np.asarray(diag, dtype=float).reshape(-1)
            if np.any(d < 0):
                raise NotPSD("negative diagonal covariance entry")
            self._diag = d
            self._dense = None
            self.dim = d.size
        else:
            a = np.asarray(dense, dtype=float)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise DimensionMismatch("dense covariance must be square")
            if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max())):
                raise NotPSD("dense covariance is not symmetric")
            self._diag = None
            self._dense = 0.5 * (a + a.T)
            self.dim = a.shape[0]
        self._chol = None
        self._sqrt = None

    @classmethod
    def diagonal(cls, d):
        return cls(diag=d)

    @classmethod
    def from_dense(cls, a):
        return cls(dense=a)

    @classmethod
    def scaled_identity(cls, n, variance):
        return cls(diag=np.full(n, float(variance)))

    @property
    def is_diagonal(self):
        return self._diag is not None

    def diag(self):
        if self.is_diagonal:
            return self._diag.copy()
        return np.diag(self._dense).copy()

    def as_dense(self):
        if self.is_diagonal:
            return np.diag(self._diag)
        return self._dense.copy()

    def apply(self, v):
        v = as_vector(v, self.dim)
        if self.is_diagonal:
            return self._diag * v
        return self._dense @ v

    def _cholesky(self):
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(self._dense)
            except np.linalg.LinAlgError:
                raise NotPSD("covariance is not positive definite") from None
        return self._chol

    def solve(self, v):
        """Apply the inverse; defined only for strictly PD covariances."""
        v = as_vector(v, self.dim)
        if self.is_diagonal:
            if np.any(self._diag <= 0):
                raise NotPSD("diagonal covariance not strictly positive")
            return v / self._diag
        l = self._cholesky()
        return np.linalg.solve(l.T, np.linalg.solve(l, v))

    def sqrt_factor(self):
        """A factor L with C = L L^T (Cholesky when PD, eigen otherwise)."""
        if self._sqrt is not None:
            return self._sqrt
        if self.is_diagonal:
            self._sqrt = np.diag(np.sqrt(self._diag))
            return self._sqrt
        try:
            self._sqrt = self._cholesky()
        except NotPSD:
            w, v = np.linalg.eigh(self._dense)
            scale = max(1.0, abs(w).max())
            if w.min() < -1e-8 * scale:
                raise NotPSD(
                    f"covariance indefinite: min eigenvalue {w.min():.3e}"
                ) from None
            self._sqrt = v @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
        return self._sqrt

    def sqrt_apply(self, z):
        z = as_vector(z, self.dim)
        if self.is_diagonal:
            return np.sqrt(self._diag) * z
        return self.sqrt_factor() @ z


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float                     # final relative residual
    residual_history: list = field(default_factory=list)
    converged: bool = True


def cg_solve(op, rhs, tol=1e-10, max_iter=None, precond=None):
    """Solve op(x) = rhs by (optionally preconditioned) conjugate gradients.

    Parameters
    ----------
    op : SymOp or callable
        Symmetric positive definite operator.
    rhs : array
        Right-hand side.
    tol : float
        Relative residual target, ||op(x) - rhs|| <= tol * ||rhs||.
    max_iter : int, optional
        Defaults to 10 * dim (CG terminates in dim steps in exact arithmetic).
    precond : callable, optional
        Approximate inverse applied to residuals (e.g. a diagonal scaling).

    Raises
    ------
    NonConvergence
        Residual above tol after max_iter; carries the last iterate.
    BreakdownNegativeCurvature
        Encountered p^T op p <= 0; carries the last iterate so callers can
        fall back to a quasi-Newton approximation.
    """
    apply_op = op.apply if isinstance(op, SymOp) else op
    b = as_vector(rhs)
    n = b.size
    if max_iter is None:
        max_iter = 10 * n
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return CgResult(np.zeros(n), 0, 0.0, [0.0])

    x = np.zeros(n)
    r = b.copy()
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = float(r @ z)
    history = [1.0]

    for k in range(max_iter):
        ap = np.asarray(apply_op(p), dtype=float)
        pap = float(p @ ap)
        if pap <= 0.0:
            raise BreakdownNegativeCurvature(
                f"non-positive curvature p^T A p = {pap:.3e} at iteration {k}",
                x=x, iterations=k,
            )
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        rel = np.linalg.norm(r) / b_norm
        history.append(rel)
        if rel <= tol:
            return CgResult(x, k + 1, rel, history)
        z = precond(r) if precond is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new

    raise NonConvergence(
        f"CG residual {history[-1]:.3e} above tol {tol:.1e} after {max_iter} iterations",
        x=x, residual=history[-1], iterations=max_iter,
    )


def _two_loop(g, pairs, gamma):
    """Apply the L-BFGS inverse-Hessian built from (s, y) pairs to g."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    q *= gamma
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    converged: bool
    inv_hessian: SymOp
    f_history: list
    grad_norm_history: list
    n_evals: int


# Wolfe constants, conventional for quasi-Newton methods.
_C1 = 1e-4
_C2 = 0.9


def _wolfe_line_search(phi, phi0, dphi0, initial=1.0, max_evals=30):
    """Strong-Wolfe step selection with one quadratic-interpolation
    refinement before bracketing.

    The refinement lands on the exact 1-D minimizer whenever the
    objective is quadratic along the ray, which makes the optimizer
    terminate finitely on quadratic costs and renders the accumulated
    inverse-Hessian exact there.

    `phi(a)` must return (value, slope).  Returns (alpha, value, slope,
    evals).  Raises LineSearchFailure when no acceptable step is found.
    """
    if dphi0 >= 0:
        raise LineSearchFailure(f"non-descent direction, slope {dphi0:.3e}")

    # f comparisons saturate at rounding level; the approximate branch
    # (Hager-Zhang style) certifies such steps by slope instead.
    f_slack = 8.0 * _EPS * (1.0 + abs(phi0))

    def acceptable(a, f, df):
        if not np.isfinite(f):
            return False
        if abs(df) > _C2 * abs(dphi0):
            return False
        if f <= phi0 + _C1 * a * dphi0:
            return True
        return f <= phi0 + f_slack and df >= (2.0 * _C1 - 1.0) * dphi0

    evals = 0
    alpha = float(initial)
    f1, df1 = phi(alpha)
    evals += 1

    # Secant-on-slope refinement: exact for a quadratic phi.
    denom = (df1 - dphi0) / alpha
    if np.isfinite(denom) and denom > _EPS * max(abs(df1), abs(dphi0), 1.0):
        aq = -dphi0 / denom
        if 1e-3 * alpha <= aq <= 1e3 * alpha:
            fq, dfq = phi(aq)
            evals += 1
            if acceptable(aq, fq, dfq):
                return aq, fq, dfq, evals
            if acceptable(alpha, f1, df1):
                return alpha, f1, df1, evals
            # Keep the better evaluated point as the bracketing probe.
            if fq < f1:
                alpha, f1, df1 = aq, fq, dfq
    elif acceptable(alpha, f1, df1):
        return alpha, f1, df1, evals

    # Standard bracket-then-zoom (expand while the step looks too short).
    lo, f_lo, df_lo = 0.0, phi0, dphi0
    hi, f_hi, df_hi = alpha, f1, df1
    while f_hi <= phi0 + _C1 * hi * dphi0 and df_hi < 0 and evals < max_evals:
        if acceptable(hi, f_hi, df_hi):
            return hi, f_hi, df_hi, evals
        lo, f_lo, df_lo = hi, f_hi, df_hi
        hi *= 4.0
        f_hi, df_hi = phi(hi)
        evals += 1
    if acceptable(hi, f_hi, df_hi):
        return hi, f_hi, df_hi, evals

    # Zoom: interval [lo, hi] now brackets a strong-Wolfe point.
    for _ in range(max(max_evals - evals, 1)):
        # Quadratic interpolation with a bisection safeguard.
        denom = df_lo - (f_lo - f_hi) / (lo - hi) if lo != hi else 0.0
        mid = 0.5 * (lo + hi)
        if denom != 0.0:
            trial = lo + 0.5 * (hi - lo) * df_lo / denom
            width = abs(hi - lo)
            if not (min(lo, hi) + 0.05 * width <= trial <= max(lo, hi) - 0.05 * width):
                trial = mid
        else:
            trial = mid
        f_t, df_t = phi(trial)
        evals += 1
        if acceptable(trial, f_t, df_t):
            return trial, f_t, df_t, evals
        if f_t > phi0 + _C1 * trial * dphi0 or f_t >= f_lo:
            hi, f_hi, df_hi = trial, f_t, df_t
        else:
            if df_t * (hi - lo) >= 0:
                hi, f_hi, df_hi = lo, f_lo, df_lo
            lo, f_lo, df_lo = trial, f_t, df_t
        if abs(hi - lo) < 1e-14 * max(1.0, abs(lo)):
            break

    raise LineSearchFailure(
        f"no Wolfe step after {evals} evaluations (objective nonsmooth or badly scaled?)"
    )


def lbfgs_minimize(f_and_grad, x_init, grad_tol=1e-8, max_iter=500, memory=20):
    """Minimize a smooth function with limited-memory BFGS.

    Parameters
    ----------
    f_and_grad : callable
        Maps x to (value, gradient).
    x_init : array
        Starting point.
    grad_tol : float
        Stop when ||grad||_2 <= grad_tol.
    max_iter : int
        Iteration cap; hitting it returns converged=False.
    memory : int
        Number of curvature pairs retained.

    Returns
    -------
    LbfgsResult
        Includes `inv_hessian`, a SymOp applying the accumulated two-loop
        recursion (usable as an approximate inverse reduced Hessian).

    Raises
    ------
    LineSearchFailure
        If no Wolfe step exists even along steepest descent; carries the
        current iterate.
    """
    x = as_vector(x_init).copy()
    f, g = f_and_grad(x)
    f = float(f)
    g = as_vector(g, x.size)
    n_evals = 1
    pairs = []
    gamma = 1.0
    f_history = [f]
    grad_norm_history = [float(np.linalg.norm(g))]

    def make_inv_hessian():
        frozen = [(s.copy(), y.copy(), rho) for s, y, rho in pairs]
        frozen_gamma = gamma
        return SymOp(lambda v: _two_loop(np.asarray(v, dtype=float), frozen, frozen_gamma), x.size)

    k = 0
    while grad_norm_history[-1] > grad_tol and k < max_iter:
        p = -_two_loop(g, pairs, gamma)
        dphi0 = float(g @ p)
        if dphi0 >= 0:
            # Stale curvature made the direction uphill: restart from
            # steepest descent.
            pairs.clear()
            gamma = 1.0
            p = -g
            dphi0 = float(g @ p)

        trial = {}

        def phi(a):
            xa = x + a * p
            fa, ga = f_and_grad(xa)
            fa = float(fa)
            if not np.isfinite(fa):
                # Off the cliff (model blow-up or overflow): make the step
                # unacceptable so the search backtracks.
                trial[a] = (xa, np.inf, None)
                return np.inf, np.inf
            trial[a] = (xa, fa, as_vector(ga, x.size))
            return fa, float(trial[a][2] @ p)

        initial = min(1.0, 1.0 / grad_norm_history[-1]) if not pairs else 1.0
        try:
            alpha, _, _, evals = _wolfe_line_search(phi, f, dphi0, initial=initial)
        except LineSearchFailure as exc:
            n_evals += len(trial)
            # Fall back to the best strictly-decreasing trial; without one
            # we are either at the numerical floor (stop gracefully) or
            # the objective resists descent along its own gradient
            # (genuine failure).
            finite = [(a, t) for a, t in trial.items() if np.isfinite(t[1])]
            best = min(finite, key=lambda kv: kv[1][1], default=None)
            floor = 64.0 * _EPS * (1.0 + abs(f))
            spread = (max(t[1] for _, t in finite) - best[1][1]) if finite else np.inf
            if best is not None and best[1][1] < f:
                alpha = best[0]
            elif abs(dphi0) <= floor or spread <= 8.0 * floor:
                # Predicted decrease below the rounding resolution of f,
                # or the objective is flat to rounding across every probed
                # step: the iterate is at the achievable floor.  (A rising
                # objective along a claimed descent direction shows a
                # large spread instead and still raises.)
                break
            else:
                exc.x = x
                exc.iterations = k
                raise
        else:
            n_evals += evals
        x_new, f_new, g_new = trial[alpha]

        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > _EPS * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
            if len(pairs) > memory:
                pairs.pop(0)
            gamma = sy / float(y @ y)

        x, f, g = x_new, f_new, g_new
        f_history.append(f)
        grad_norm_history.append(float(np.linalg.norm(g)))
        k += 1

    return LbfgsResult(
        x=x,
        f=f,
        grad=g,
        iterations=k,
        converged=grad_norm_history[-1] <= grad_tol,
        inv_hessian=make_inv_hessian(),
        f_history=f_history,
        grad_norm_history=grad_norm_history,
        n_evals=n_evals,
    )


def default_fd_step(x):
    """cbrt(machine eps) * (1 + ||x||_inf): the central-difference optimum."""
    x = np.asarray(x, dtype=float)
    scale = np.abs(x).max() if x.size else 0.0
    return _EPS ** (1.0 / 3.0) * (1.0 + scale)


def fd_gradient(f, x, step=None):
    """Central-difference gradient of a scalar function, error O(step^2)."""
    x = as_vector(x)
    h = default_fd_step(x) if step is None else float(step)
    g = np.empty(x.size)
    e = np.zeros(x.size)
    for i in range(x.size):
        e[i] = h
        g[i] = (float(f(x + e)) - float(f(x - e))) / (2.0 * h)
        e[i] = 0.0
    return g


def fd_jacvec(g, x, direction, step=None):
    """Central-difference directional derivative of a vector function."""
    x = as_vector(x)
    d = as_vector(direction, x.size)
    h = default_fd_step(x) if step is None else float(step)
    gp = np.asarray(g(x + h * d), dtype=float)
    gm = np.asarray(g(x - h * d), dtype=float)
    return (gp - gm) / (2.0 * h)
