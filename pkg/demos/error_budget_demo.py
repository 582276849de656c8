#!/usr/bin/env python3
"""Deterministic error budget on a diffusion twin experiment.

A reference temperature field drives the periodic 1-D heat model; noisy
observations of it are assimilated to recover the initial condition.  We
then inject a known realization of observation errors plus a constant
model-tendency error, and compare:

  * the brute-force answer: re-solve the perturbed problem and difference
    the quantity of interest (the mean of the recovered initial field);
  * the first-order estimate: one Hessian solve + two sweeps, then a
    cheap contraction against the injected errors.

The per-time/per-gridpoint attribution shows *where* the errors hurt.
"""

import numpy as np

from varest import (
    Background,
    CovMatrix,
    ObservationSet,
    PerturbationSpec,
    QoiFunctional,
    assimilate,
    compute_impact_factors,
    constant_model_error,
    estimate_error_budget,
    heat1d_build,
    oracle_perturbed_resolve,
    propagate,
    sample_data_errors,
)

# --- the ideal twin problem -------------------------------------------------
model = heat1d_build(n=50, dt=1e-3, num_steps=100)
truth = 1.0 + np.exp(-((model.grid / 0.3) ** 2))
traj = propagate(model, truth)

rng = np.random.default_rng(0)
values, covs = {}, {}
for k in range(0, 101, 10):           # observations every 10 steps
    std = np.maximum(0.1 * np.abs(traj.states[k]), 1e-3)   # 10% noise level
    values[k] = traj.states[k].copy()                      # noise-free reference
    covs[k] = CovMatrix.diagonal(std**2)
obs = ObservationSet.identity(50, values, covs)
bg = Background(x_b=truth + 0.2 * rng.standard_normal(50),
                b0=CovMatrix.scaled_identity(50, 0.04))
qoi = QoiFunctional.mean_state(50)

ideal = assimilate(model, obs, bg)
print(f"ideal analysis: {ideal.iterations} iterations, "
      f"final gradient norm {ideal.grad_norm_history[-1]:.2e}")

# --- impact factors at the analysis ------------------------------------------
factors = compute_impact_factors(qoi, ideal)
print(f"Hessian equation solved to relative residual "
      f"{factors.hessian_solve_residual:.2e}")

# --- one realization of data errors, one constant model error ----------------
spec = PerturbationSpec(seed=7, data_noise="obs")
data_errors = sample_data_errors(spec, obs)
model_errors = constant_model_error(1.0, model.dim, model.num_steps,
                                    model.time_step)

print(f"\n{'':14s}{'actual':>14s}{'estimated':>14s}{'ratio':>8s}")
for label, me, de in (("data errors", None, data_errors),
                      ("model errors", model_errors, None)):
    budget = estimate_error_budget(factors, ideal, model_errors=me,
                                   data_errors=de)
    actual = oracle_perturbed_resolve(model, obs, bg, qoi, model_errors=me,
                                      data_errors=de, ideal_result=ideal)
    print(f"{label:14s}{actual:14.4e}{budget.total:14.4e}"
          f"{budget.total / actual:8.3f}")

# --- attribution: which observation instants matter most ---------------------
budget = estimate_error_budget(factors, ideal, data_errors=data_errors)
by_time = {}
for (k, i), v in budget.per_component_adj.items():
    by_time[k] = by_time.get(k, 0.0) + v
print("\ncontribution of each observation time to the estimated error:")
for k in sorted(by_time):
    bar = "#" * int(round(3e4 * abs(by_time[k])))
    print(f"  t = {k:3d}  {by_time[k]:+.3e}  {bar}")
print("(diffusion damps later information: early misfits dominate)")
