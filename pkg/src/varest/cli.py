"""Experiment runner: sectioned key=value configs in, CSV results and a
JSON summary out.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
Everything scientific lives in the config file; the only environment
override is VAREST_OUT for the output directory (command line --out wins
over both).
"""

import argparse
import configparser
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, VarestError
from .estimator import (QoiFunctional, compute_impact_factors, estimate_error_budget,
                        posterior_covariance_column)
from .fourdvar import Background, ObservationSet, assimilate, refine_analysis
from .linalg import CovMatrix
from .model import propagate
from .models import heat1d_build, lorenz96_build
from .perturbation import (RNG_ALGORITHM, CorrelationKernel, PerturbationSpec,
                           constant_model_error, member_rng, sample_data_errors,
                           sample_model_errors)
from .validation import convergence_order_study, ensemble_validate, oracle_perturbed_resolve

# Streams of the base seed used for problem synthesis (ensemble members
# use streams 0/1 of their own member index via the perturbation module).
_STREAM_OBS = 2
_STREAM_BACKGROUND = 3
_STREAM_TRUTH = 4

_FLOAT_FMT = "%.17g"

# section -> {key: parser}; unknown sections/keys are rejected.
_SCHEMA = {
    "experiment": {"kind": str, "seed": int, "members": int, "scales": "floats",
                   "column": int, "grad_tol": float, "hessian_tol": float},
    "model": {"kind": str, "n": int, "steps": int, "dt": float, "alpha": float,
              "integrator": str, "forcing": float},
    "truth": {"kind": str, "amplitude": float, "width": float, "offset": float},
    "obs": {"every": int, "times": "ints", "operator": str, "noise": str,
            "sample_noise": "bool"},
    "background": {"sigma": float, "variance": float},
    "qoi": {"kind": str},
    "perturbation": {"data_noise": str, "data_bias": float, "model_noise": str,
                     "kernel": str, "length_scale": float, "amplitude": float,
                     "model_bias_constant": float},
    "output": {"dir": str},
}

_EXPERIMENT_KINDS = ("assimilate", "estimate", "ensemble_validate",
                     "convergence_study", "covariance_column")


def _parse_value(raw, kind, where):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw.strip()
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "floats":
            return [float(tok) for tok in raw.replace(",", " ").split()]
        if kind == "ints":
            return [int(tok) for tok in raw.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unhandled type {kind}")


def parse_config(path, overrides=()):
    """Parse and validate an experiment config; returns {section: {key: value}}.

    Unknown sections or keys are rejected so typos fail loudly.  Overrides
    are `section.key=value` strings applied before validation.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (configparser.Error, OSError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None

    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override must be section.key=value: {ov!r}")
        key, value = ov.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key must be section.key: {key!r}")
        section, name = key.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)

    config = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        config[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            config[section][key] = _parse_value(raw, _SCHEMA[section][key],
                                                f"[{section}] {key}")

    kind = config.get("experiment", {}).get("kind")
    if kind not in _EXPERIMENT_KINDS:
        raise ConfigError(
            f"[experiment] kind must be one of {_EXPERIMENT_KINDS}, got {kind!r}"
        )
    if "model" not in config or "kind" not in config["model"]:
        raise ConfigError("[model] section with a kind is required")
    return config


# ---------------------------------------------------------------------------
# Problem synthesis from a validated config
# ---------------------------------------------------------------------------

def _build_model(cfg):
    sec = cfg["model"]
    kind = sec["kind"]
    if kind == "heat1d":
        return heat1d_build(
            n=sec.get("n", 50), alpha=sec.get("alpha", 1.0), dt=sec.get("dt", 1e-3),
            num_steps=sec.get("steps", 100),
            integrator=sec.get("integrator", "crank_nicolson"),
        )
    if kind == "lorenz96":
        return lorenz96_build(
            n=sec.get("n", 40), forcing=sec.get("forcing", 8.0),
            dt=sec.get("dt", 0.05), num_steps=sec.get("steps", 20),
        )
    raise ConfigError(f"unknown model kind {kind!r}")


def _build_truth(cfg, model, seed):
    sec = cfg.get("truth", {})
    kind = sec.get("kind", "gaussian_bump" if hasattr(model, "grid") else "perturbed_equilibrium")
    amplitude = sec.get("amplitude", 1.0)
    if kind == "gaussian_bump":
        if not hasattr(model, "grid"):
            raise ConfigError("gaussian_bump truth needs a gridded model")
        width = sec.get("width", 0.3)
        offset = sec.get("offset", 1.0)
        return offset + amplitude * np.exp(-((model.grid / width) ** 2))
    if kind == "perturbed_equilibrium":
        base = cfg["model"].get("forcing", 8.0)
        rng = member_rng(seed, stream=_STREAM_TRUTH)
        return base + amplitude * rng.standard_normal(model.dim)
    raise ConfigError(f"unknown truth kind {kind!r}")


def _obs_times(cfg, model):
    sec = cfg.get("obs", {})
    if "times" in sec:
        times = sorted(set(sec["times"]))
        if times and (times[0] < 0 or times[-1] > model.num_steps):
            raise ConfigError("observation times outside 0..steps")
        return times
    every = sec.get("every", max(1, model.num_steps // 10))
    if every < 1:
        raise ConfigError("[obs] every must be >= 1")
    return list(range(0, model.num_steps + 1, every))


def _obs_noise_std(spec_str, truth_values):
    """R standard deviations from 'relative:frac' or 'absolute:sigma'."""
    mode, _, value = spec_str.partition(":")
    if not value:
        raise ConfigError(f"[obs] noise must be relative:<frac> or absolute:<sigma>, got {spec_str!r}")
    v = float(value)
    if mode == "relative":
        # Floored so fully quiescent components keep a usable weight.
        return np.maximum(v * np.abs(truth_values), 1e-3 * max(1.0, np.abs(truth_values).max()))
    if mode == "absolute":
        return np.full_like(truth_values, v)
    raise ConfigError(f"[obs] unknown noise mode {mode!r}")


def _build_problem(cfg, model, seed):
    """Truth, observations (optionally noise-carrying), and background."""
    truth = _build_truth(cfg, model, seed)
    traj = propagate(model, truth)
    times = _obs_times(cfg, model)
    sec = cfg.get("obs", {})
    noise_spec = sec.get("noise", "relative:0.1")
    operator = sec.get("operator", "identity")

    rng_obs = member_rng(seed, stream=_STREAM_OBS)
    values, covs = {}, {}
    indices = None
    if operator.startswith("components:"):
        indices = [int(tok) for tok in operator.split(":", 1)[1].replace(",", " ").split()]
    elif operator != "identity":
        raise ConfigError(f"[obs] unknown operator {operator!r}")

    for k in times:
        full = traj.states[k]
        observed = full if indices is None else full[indices]
        std = _obs_noise_std(noise_spec, observed)
        y = observed.copy()
        if sec.get("sample_noise", False):
            y = y + std * rng_obs.standard_normal(observed.size)
        values[k] = y
        covs[k] = CovMatrix.diagonal(std**2)

    if indices is None:
        obs = ObservationSet.identity(model.dim, values, covs)
    else:
        obs = ObservationSet.components(model.dim, indices, values, covs)

    bsec = cfg.get("background", {})
    sigma = bsec.get("sigma", 0.2)
    variance = bsec.get("variance", max(sigma**2, 1e-8))
    rng_bg = member_rng(seed, stream=_STREAM_BACKGROUND)
    x_b = truth + sigma * rng_bg.standard_normal(model.dim)
    bg = Background(x_b=x_b, b0=CovMatrix.scaled_identity(model.dim, variance))
    return truth, traj, obs, bg


def _build_qoi(cfg, model):
    kind = cfg.get("qoi", {}).get("kind", "mean_state")
    if kind == "mean_state":
        return QoiFunctional.mean_state(model.dim)
    if kind.startswith("component:"):
        return QoiFunctional.component(model.dim, int(kind.split(":", 1)[1]))
    if kind.startswith("block_mean:"):
        lo, hi = (int(t) for t in kind.split(":", 1)[1].split(","))
        return QoiFunctional.block_mean(model.dim, lo, hi)
    raise ConfigError(f"[qoi] unknown kind {kind!r}")


def _build_perturbations(cfg, model, obs, seed):
    """Realized per-run perturbations plus the sampling spec behind them."""
    sec = cfg.get("perturbation", {})
    data_noise = sec.get("data_noise", "none")
    if data_noise == "none":
        noise = None
    elif data_noise == "obs":
        noise = "obs"
    elif data_noise.startswith("scale:"):
        noise = float(data_noise.split(":", 1)[1])
    else:
        raise ConfigError(f"[perturbation] unknown data_noise {data_noise!r}")

    bias_value = sec.get("data_bias", 0.0)
    data_bias = None
    if bias_value:
        data_bias = {k: np.full(obs.op(k).out_dim, bias_value) for k in obs.times}

    kernel = None
    if sec.get("model_noise", "none") == "kernel":
        kernel = CorrelationKernel(
            kind=sec.get("kernel", "diagonal"),
            length_scale=sec.get("length_scale", 3.0),
            amplitude=sec.get("amplitude", 1e-4),
        )
    elif sec.get("model_noise", "none") != "none":
        raise ConfigError("[perturbation] model_noise must be none or kernel")

    model_bias = None
    bias_const = sec.get("model_bias_constant", 0.0)
    if bias_const:
        model_bias = constant_model_error(bias_const, model.dim, model.num_steps,
                                          model.time_step)

    spec = PerturbationSpec(data_bias=data_bias, data_noise=noise,
                            model_bias=model_bias, seed=seed)
    have_data = noise is not None or data_bias is not None
    have_model = kernel is not None or model_bias is not None

    data_errors = sample_data_errors(spec, obs, member=0) if have_data else None
    model_errors = (sample_model_errors(spec, kernel, model.dim, model.num_steps, member=0)
                    if have_model else None)
    return spec, kernel, data_errors, model_errors


# ---------------------------------------------------------------------------
# Result files
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(
                _FLOAT_FMT % v if isinstance(v, float) else str(v) for v in row
            ) + "\n")


def emit_contributions(budget, path):
    """Write the per-summand attribution of an ErrorBudget as CSV with
    columns (time_index, state_or_obs_index, kind, contribution); column
    sums per kind reproduce the budget scalars."""
    rows = []
    for (k, i), v in sorted(budget.per_component_fwd.items()):
        rows.append((k, i, "fwd", float(v)))
    for (k, i), v in sorted(budget.per_component_adj.items()):
        rows.append((k, i, "adj", float(v)))
    for (k, i), v in sorted(budget.per_component_opt.items()):
        rows.append((k, i, "opt", float(v)))
    _write_csv(path, ("time_index", "state_or_obs_index", "kind", "contribution"), rows)


def read_contributions(path):
    """Parse a contributions CSV back into {(k, i, kind): contribution}."""
    out = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != ["time_index", "state_or_obs_index", "kind", "contribution"]:
            raise ConfigError(f"unexpected contributions header in {path}")
        for line in fh:
            k, i, kind, v = line.strip().split(",")
            out[(int(k), int(i), kind)] = float(v)
    return out


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------

def _run_assimilate(cfg, model, seed, out_dir, grad_tol):
    truth, _, obs, bg = _build_problem(cfg, model, seed)
    result = assimilate(model, obs, bg, grad_tol=grad_tol)
    rows = [(i, float(truth[i]), float(bg.x_b[i]), float(result.analysis[i]))
            for i in range(model.dim)]
    _write_csv(out_dir / "analysis.csv", ("index", "truth", "background", "analysis"), rows)
    rmse = lambda v: float(np.sqrt(np.mean((v - truth) ** 2)))
    return {
        "final_cost": result.cost_history[-1],
        "final_grad_norm": result.grad_norm_history[-1],
        "iterations": result.iterations,
        "converged": bool(result.converged),
        "rmse_background": rmse(bg.x_b),
        "rmse_analysis": rmse(result.analysis),
    }


def _run_estimate(cfg, model, seed, out_dir, grad_tol, hessian_tol):
    _, _, obs, bg = _build_problem(cfg, model, seed)
    qoi = _build_qoi(cfg, model)
    _, _, data_errors, model_errors = _build_perturbations(cfg, model, obs, seed)
    if data_errors is None and model_errors is None:
        raise ConfigError("[perturbation] section enables no perturbations")

    oracle_tol = grad_tol or 1e-10
    ideal = refine_analysis(assimilate(model, obs, bg, grad_tol=grad_tol),
                            grad_tol=oracle_tol)
    factors = compute_impact_factors(qoi, ideal, tol=hessian_tol)
    budget = estimate_error_budget(factors, ideal, model_errors=model_errors,
                                   data_errors=data_errors)
    actual = oracle_perturbed_resolve(model, obs, bg, qoi,
                                      model_errors=model_errors,
                                      data_errors=data_errors,
                                      grad_tol=oracle_tol, ideal_result=ideal)
    emit_contributions(budget, out_dir / "contributions.csv")
    return {
        "qoi_error_actual": float(actual),
        "qoi_error_estimate": budget.total,
        "fwd": budget.fwd, "adj": budget.adj, "opt": budget.opt,
        "ratio_estimate_to_actual": budget.total / actual if actual else float("nan"),
        "hessian_solve_residual": factors.hessian_solve_residual,
    }


def _run_ensemble(cfg, model, seed, out_dir, grad_tol):
    _, _, obs, bg = _build_problem(cfg, model, seed)
    qoi = _build_qoi(cfg, model)
    spec, kernel, _, _ = _build_perturbations(cfg, model, obs, seed)
    n_members = cfg.get("experiment", {}).get("members", 15)
    report = ensemble_validate(model, obs, bg, qoi, spec, kernel=kernel,
                               n_members=n_members, grad_tol=grad_tol)
    rows = [(e, float(v)) for e, v in enumerate(report.member_qoi_errors)]
    _write_csv(out_dir / "members.csv", ("member", "qoi_error"), rows)
    return {
        "ensemble_mean": report.ensemble_mean,
        "ensemble_var": report.ensemble_var,
        "variational_mean": report.variational_mean,
        "variational_var": report.variational_var,
        "n_members": report.n_members,
        "n_failed": report.n_failed,
    }


def _run_convergence(cfg, model, seed, out_dir, grad_tol):
    _, _, obs, bg = _build_problem(cfg, model, seed)
    qoi = _build_qoi(cfg, model)
    _, _, data_errors, model_errors = _build_perturbations(cfg, model, obs, seed)
    scales = cfg.get("experiment", {}).get("scales", [1.0, 1e-1, 1e-2, 1e-3])
    study = convergence_order_study(model, obs, bg, qoi,
                                    base_model_errors=model_errors,
                                    base_data_errors=data_errors,
                                    scales=scales, grad_tol=grad_tol or 1e-10)
    rows = [(float(s), float(e), float(a), float(d))
            for s, e, a, d in zip(study.scales, study.estimates, study.actuals, study.diffs)]
    _write_csv(out_dir / "study.csv", ("scale", "estimate", "actual", "abs_diff"), rows)
    return {
        "slope": study.slope,
        "degenerate": bool(study.degenerate),
        "noise_floor": study.noise_floor,
    }


def _run_covariance_column(cfg, model, seed, out_dir, grad_tol, hessian_tol):
    _, _, obs, bg = _build_problem(cfg, model, seed)
    index = cfg.get("experiment", {}).get("column", 0)
    result = assimilate(model, obs, bg, grad_tol=grad_tol)
    column = posterior_covariance_column(result, index, tol=hessian_tol)
    rows = [(i, float(column[i])) for i in range(model.dim)]
    _write_csv(out_dir / "column.csv", ("index", "value"), rows)
    return {"column_index": index, "diagonal_value": float(column[index])}


def run(config_path, overrides=(), out_dir=None):
    """Execute the experiment described by a config file.

    Returns the process exit code: 0 success, 2 config error, 3 numerical
    failure.  Results land in the output directory (config [output] dir,
    overridden by VAREST_OUT, overridden by `out_dir`).
    """
    started = time.time()
    try:
        cfg = parse_config(config_path, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    target = out_dir or os.environ.get("VAREST_OUT") or cfg.get("output", {}).get("dir", "results")
    target = Path(target)
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"config error: cannot create output dir: {exc}", file=sys.stderr)
        return 2

    exp = cfg.get("experiment", {})
    kind = exp["kind"]
    seed = exp.get("seed", 0)
    grad_tol = exp.get("grad_tol")
    hessian_tol = exp.get("hessian_tol", 1e-8)

    try:
        model = _build_model(cfg)
        if kind == "assimilate":
            payload = _run_assimilate(cfg, model, seed, target, grad_tol)
        elif kind == "estimate":
            payload = _run_estimate(cfg, model, seed, target, grad_tol, hessian_tol)
        elif kind == "ensemble_validate":
            payload = _run_ensemble(cfg, model, seed, target, grad_tol)
        elif kind == "convergence_study":
            payload = _run_convergence(cfg, model, seed, target, grad_tol)
        else:
            payload = _run_covariance_column(cfg, model, seed, target, grad_tol, hessian_tol)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except VarestError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3

    summary = {
        "config": cfg,
        "build": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "wall_time_s": time.time() - started,
        "payload": payload,
    }
    with open(target / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")

    print(f"experiment: {kind}   (seed {seed})")
    width = max(len(k) for k in payload)
    for key, value in payload.items():
        if isinstance(value, float):
            print(f"  {key:<{width}}  {value: .6e}")
        else:
            print(f"  {key:<{width}}  {value}")
    print(f"results in {target}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="varest",
        description="Variational assimilation experiments with first-order "
                    "a-posteriori error estimates for a scalar quantity of interest.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute an experiment config")
    run_p.add_argument("config", help="path to the experiment config file")
    run_p.add_argument("--override", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config entry")
    run_p.add_argument("--out", default=None, help="output directory")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, overrides=args.override, out_dir=args.out)
    parser.error(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
