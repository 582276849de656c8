"""Synthesis of observation and model errors: seeded Gaussian sampling,
bias injection, and ring-topology correlation kernels.

All sampling is driven by a counter-based generator (numpy Philox) keyed
by (seed, member index), so realizations are reproducible bit-for-bit and
ensemble members draw from independent streams regardless of execution
order.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import j0

from .errors import DimensionMismatch, NotPSD
from .linalg import CovMatrix, as_vector

RNG_ALGORITHM = "philox4x64-10 (numpy Philox, SeedSequence spawn_key = member index)"


def member_rng(seed, member=0, stream=0):
    """Independent generator for one ensemble member.

    `stream` separates draws of different kinds for the same member
    (0 = data errors, 1 = model errors), so the two stay uncorrelated.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(member), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class CorrelationKernel:
    """Stationary correlation on a ring of grid points.

    kind:
      * "bessel_j0_scaled": amplitude * J0(distance / length_scale).  J0
        is positive definite on the line but its ring-distance restriction
        is not: on rings of a few dozen points the eigenvalue clip removes
        up to ~10% of the trace depending on ring size and length
        scale, so this kind defaults to a 15% clip budget (the removed
        mass is always reported via `last_clipped_fraction`).
      * "exponential": amplitude * exp(-distance / length_scale); PSD on
        the ring to rounding.
      * "diagonal": amplitude * identity (uncorrelated).
    """

    kind: str = "diagonal"
    length_scale: float = 3.0      # in grid-index units
    amplitude: float = 1.0
    clip_tol: float | None = None  # max clipped trace fraction; per-kind default

    last_clipped_fraction: float = field(default=0.0, init=False, repr=False)

    def _clip_budget(self):
        if self.clip_tol is not None:
            return self.clip_tol
        return 0.15 if self.kind == "bessel_j0_scaled" else 1e-10

    def covariance(self, n):
        """Covariance matrix on an n-point ring; raises NotPSD when the
        eigenvalue clip removes more than the clip budget of the trace."""
        if self.kind == "diagonal":
            self.last_clipped_fraction = 0.0
            return CovMatrix.diagonal(np.full(n, self.amplitude))
        idx = np.arange(n)
        dist = np.minimum(idx, n - idx).astype(float)   # ring distance of row 0
        if self.kind == "bessel_j0_scaled":
            row = self.amplitude * j0(dist / self.length_scale)
        elif self.kind == "exponential":
            row = self.amplitude * np.exp(-dist / self.length_scale)
        else:
            raise DimensionMismatch(f"unknown kernel kind {self.kind!r}")
        # Circulant from the first row: C[i, j] = row[ring_dist(i, j)].
        c = np.empty((n, n))
        for i in range(n):
            c[i] = np.roll(row, i)
        c = 0.5 * (c + c.T)
        w, v = np.linalg.eigh(c)
        clipped = float(-w[w < 0].sum()) if np.any(w < 0) else 0.0
        trace = float(np.trace(c))
        self.last_clipped_fraction = clipped / trace if trace > 0 else 0.0
        budget = self._clip_budget()
        if self.last_clipped_fraction > budget:
            raise NotPSD(
                f"kernel clipping removed {self.last_clipped_fraction:.3e} of the trace "
                f"(tolerance {budget:.1e})"
            )
        w = np.clip(w, 0.0, None)
        return CovMatrix.from_dense((v * w) @ v.T)


@dataclass
class PerturbationSpec:
    """Statistical description of the injected errors.

    data_bias: {k: vec} added to every sampled observation error.
    data_noise: "obs" (covariance equal to the observation-error
        covariance), None, a scalar multiplier of it, or {k: CovMatrix}.
    model_bias: (N, n) array, a single per-step vector, or None.
    model_noise_cov: CovMatrix per step (block-diagonal in time), or None.
    seed: base seed for all sampling streams.
    """

    data_bias: dict | None = None
    data_noise: object = "obs"
    model_bias: object = None
    model_noise_cov: CovMatrix | None = None
    seed: int = 0

    def data_noise_cov_at(self, obs, k):
        if self.data_noise is None:
            return None
        if self.data_noise == "obs":
            return obs.r(k)
        if isinstance(self.data_noise, dict):
            return self.data_noise[k]
        scale = float(self.data_noise)
        r = obs.r(k)
        if r.is_diagonal:
            return CovMatrix.diagonal(scale * r.diag())
        return CovMatrix.from_dense(scale * r.as_dense())

    def model_bias_rows(self, n, n_steps):
        """Bias as an (N, n) array (row k-1 is the step-k bias)."""
        if self.model_bias is None:
            return np.zeros((n_steps, n))
        arr = np.asarray(self.model_bias, dtype=float)
        if arr.ndim == 1:
            return np.tile(as_vector(arr, n), (n_steps, 1))
        if arr.shape != (n_steps, n):
            raise DimensionMismatch(f"model bias shape {arr.shape} != ({n_steps}, {n})")
        return arr


def sample_data_errors(spec, obs, member=0):
    """One realization of observation errors: {k: bias_k + C_k^{1/2} z}."""
    rng = member_rng(spec.seed, member, stream=0)
    out = {}
    for k in obs.times:
        p = obs.op(k).out_dim
        delta = np.zeros(p)
        if spec.data_bias and k in spec.data_bias:
            delta = delta + as_vector(spec.data_bias[k], p)
        cov = spec.data_noise_cov_at(obs, k)
        if cov is not None:
            delta = delta + cov.sqrt_apply(rng.standard_normal(p))
        out[k] = delta
    return out


def sample_model_errors(spec, kernel, n, n_steps, member=0):
    """One realization of per-step model errors, shape (N, n).

    Row k-1 is bias_k plus a draw from the kernel covariance on the
    model's ring topology, scaled by the spec's model_noise_cov when that
    is given instead of a kernel amplitude.
    """
    rng = member_rng(spec.seed, member, stream=1)
    out = spec.model_bias_rows(n, n_steps)
    if kernel is not None:
        cov = kernel.covariance(n)
        for k in range(n_steps):
            out[k] = out[k] + cov.sqrt_apply(rng.standard_normal(n))
    elif spec.model_noise_cov is not None:
        for k in range(n_steps):
            out[k] = out[k] + spec.model_noise_cov.sqrt_apply(rng.standard_normal(n))
    return out


def constant_model_error(value, n, n_steps, dt):
    """Per-step residual of a constant forcing error: every row is
    value * dt * ones (the one-step increment of a constant unit tendency
    perturbation)."""
    return np.full((n_steps, int(n)), float(value) * float(dt))
