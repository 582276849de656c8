#!/usr/bin/env python3
"""Cross-validating the probabilistic error estimates with an ensemble.

The closed-form mean/variance of the estimated QoI error (one Hessian
solve, two sweeps, then covariance contractions) is compared against the
sample statistics of actually re-solving the assimilation under fifteen
independent error realizations, once for observation noise and once for
model noise.
"""

import numpy as np

from varest import (
    Background,
    CovMatrix,
    ObservationSet,
    PerturbationSpec,
    QoiFunctional,
    ensemble_validate,
    heat1d_build,
    propagate,
)

model = heat1d_build(n=50, dt=1e-3, num_steps=100)
truth = 1.0 + np.exp(-((model.grid / 0.3) ** 2))
traj = propagate(model, truth)

rng = np.random.default_rng(1)
values, covs = {}, {}
for k in range(0, 101, 10):
    std = np.maximum(0.1 * np.abs(traj.states[k]), 1e-3)
    values[k] = traj.states[k].copy()
    covs[k] = CovMatrix.diagonal(std**2)
obs = ObservationSet.identity(50, values, covs)
bg = Background(x_b=truth + 0.2 * rng.standard_normal(50),
                b0=CovMatrix.scaled_identity(50, 0.04))
qoi = QoiFunctional.mean_state(50)

experiments = [
    ("observation noise", PerturbationSpec(seed=61, data_noise="obs")),
    ("model noise", PerturbationSpec(seed=64, data_noise=None,
                                     model_noise_cov=CovMatrix.scaled_identity(50, 1e-6))),
]

print(f"{'experiment':<20}{'mean (var.)':>13}{'mean (ens.)':>13}"
      f"{'var (var.)':>13}{'var (ens.)':>13}")
for label, spec in experiments:
    report = ensemble_validate(model, obs, bg, qoi, spec, n_members=15)
    print(f"{label:<20}{report.variational_mean:13.3e}{report.ensemble_mean:13.3e}"
          f"{report.variational_var:13.3e}{report.ensemble_var:13.3e}")
    se_mean = np.sqrt(report.ensemble_var / report.n_members)
    se_var = report.ensemble_var * np.sqrt(2.0 / (report.n_members - 1))
    print(f"{'':20}ensemble standard errors: mean +-{se_mean:.1e}, "
          f"variance +-{se_var:.1e}")
print("\nWith 15 members the sample variance itself carries ~37% relative "
      "error, so agreement within a couple of standard errors is the "
      "expected outcome.")
