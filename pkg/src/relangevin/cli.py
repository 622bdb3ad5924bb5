"""Batch experiment driver.

Subcommands map one-to-one onto the library's experiments; each run writes
its data artifacts plus a manifest (config hash, seed, versions, wall time)
and exits 0 iff all declared gates pass.  Invalid configs exit 2 with a
pointered diagnostic; failed experiments exit 1 with a census file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dynamics import DriftKind
from .errors import ExperimentFailure, IntegrationFailure, ParameterError
from .ergodicity import (
    control_path,
    control_residual,
    default_bumps,
    hypoellipticity_ranks,
    lemma_a1_check,
    lemma_a2_fit,
    mixing_curve,
    sample_stationary,
    stationarity_check,
)
from .integrate import Scheme, parallel_map, pilot_dt, simulate, simulate_coupled
from .io import write_json, write_manifest, write_samples, write_table, write_trajectory
from .limits import (
    moment_uniformity_experiment,
    newtonian_rate_experiment,
    prob_convergence_experiment,
    truncate_model,
)
from .lyapunov import LyapunovParams1, LyapunovParamsN, auto_params, drift_scan, tune_constants
from .model import ConfiningSpec, ModelSpec, SingularSpec, State, default_state, validate_assumptions
from .rng import substream


class ConfigError(Exception):
    """Invalid configuration; message carries the dotted key pointer."""


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

_MODEL_KEYS = {
    "n": int, "d": int, "epsilon": float, "energy_shift": float, "delta_floor": float,
    "confining": {"family": str, "lambda": float},
    "singular": {"family": str, "beta1": float, "beta2": float, "a4": float,
                 "sigma": float, "eps_lj": float},
}
_OUTPUT_KEYS = {"directory": str, "format": str}

_EXPERIMENT_KEYS = {
    "validate": {"probe_count": int, "tolerance": float},
    "simulate": {"kind": str, "T": float, "dt": float, "method": str, "R": float,
                 "x0_q": list, "x0_p": list},
    "couple": {"T": float, "dt": float, "eps": float, "method": str, "R": float,
               "x0_q": list, "x0_p": list, "pilot": bool},
    "newton-rate": {"R": float, "T": float, "dt": float, "eps_list": list, "n": int,
                    "n_seeds": int, "x0_q": list, "x0_p": list, "slope_window": list},
    "prob-curve": {"T": float, "dt": float, "xi": float, "eps_list": list,
                   "n_seeds": int, "x0_q": list, "x0_p": list, "require_strict": bool},
    "lyapunov-scan": {"n": float, "sample_count": int, "alpha": float,
                      "eps1": float, "kappa1": float, "A1": float, "A2": float,
                      "kappaN": float},
    "tune": {"n": float, "budget": int, "sample_count": int},
    "sample-pi": {"n_samples": int, "chains": int, "burn_in": int, "thin": int},
    "stationarity": {"n_samples": int, "chains": int, "mismatch_factor": float,
                     "expect": str},
    "mixing": {"t_grid": list, "n_ens": int, "dt": float, "observable": str,
               "n_reference": int, "x0_q": list, "x0_p": list},
    "control-check": {"n_trials": int, "rho": float, "endpoint_tol": float,
                      "residual_tol": float},
    "hypo-check": {"n_states": int, "families": list, "Ns": list, "ds": list},
    "lemma-a1": {"Ns": list, "gammas": list, "ss": list, "n_trials": int},
    "lemma-a2": {"n_trials": int},
    "gamma2-uniformity": {"T": float, "dt": float, "eps_list": list, "n_seeds": int,
                          "max_ratio": float},
}

_DEFAULT_CONFIG = {
    "model": {
        "n": 1, "d": 1, "epsilon": 0.01,
        "confining": {"family": "poly", "lambda": 1.0},
        "singular": {"family": "coulomb", "a4": 1.0},
    },
    "experiment": {},
    "output": {"directory": "out", "format": "csv"},
    "seed": 1234,
}


def _check_keys(section, schema, pointer):
    if not isinstance(section, dict):
        raise ConfigError(f"{pointer}: expected a mapping")
    for key, val in section.items():
        if key not in schema:
            raise ConfigError(f"{pointer}.{key}: unknown key")
        want = schema[key]
        if isinstance(want, dict):
            _check_keys(val, want, f"{pointer}.{key}")
        elif want in (int, float):
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"{pointer}.{key}: expected a number, got {val!r}")
        elif want is bool:
            if not isinstance(val, bool):
                raise ConfigError(f"{pointer}.{key}: expected a boolean, got {val!r}")
        elif want is str:
            if not isinstance(val, str):
                raise ConfigError(f"{pointer}.{key}: expected a string, got {val!r}")
        elif want is list:
            if not isinstance(val, list):
                raise ConfigError(f"{pointer}.{key}: expected a list, got {val!r}")


def validate_config(config: dict, subcommand: str) -> None:
    allowed = {"model": _MODEL_KEYS, "experiment": _EXPERIMENT_KEYS[subcommand],
               "output": _OUTPUT_KEYS, "seed": int}
    for key in config:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown section")
    if "model" in config:
        _check_keys(config["model"], _MODEL_KEYS, "model")
    if "experiment" in config:
        _check_keys(config["experiment"], _EXPERIMENT_KEYS[subcommand], "experiment")
    if "output" in config:
        _check_keys(config["output"], _OUTPUT_KEYS, "output")
        fmt_mode = config["output"].get("format", "csv")
        if fmt_mode not in ("csv", "jsonl"):
            raise ConfigError(f"output.format: expected csv or jsonl, got {fmt_mode!r}")
    if "seed" in config and (not isinstance(config["seed"], int) or isinstance(config["seed"], bool)):
        raise ConfigError("seed: expected an integer")


def build_model(config: dict) -> ModelSpec:
    mc = config.get("model", {})
    conf = mc.get("confining", {})
    sing = mc.get("singular", {})
    try:
        confining = ConfiningSpec(family=conf.get("family", "poly"),
                                  lam=float(conf.get("lambda", 1.0)))
        kwargs = {"family": sing.get("family", "coulomb")}
        for key in ("beta1", "beta2", "a4", "sigma", "eps_lj"):
            if key in sing:
                kwargs[key] = float(sing[key])
        singular = SingularSpec(**kwargs)
        return ModelSpec(
            n=int(mc.get("n", 1)), d=int(mc.get("d", 1)),
            epsilon=float(mc.get("epsilon", 0.01)),
            confining=confining, singular=singular,
            energy_shift=mc.get("energy_shift"),
            delta_floor=float(mc.get("delta_floor", 1e-10)),
        )
    except ParameterError as exc:
        raise ConfigError(f"model: {exc}") from exc


def _x0(model, exp):
    q = exp.get("x0_q")
    p = exp.get("x0_p")
    base = default_state(model)
    if q is not None:
        base.q = np.asarray(q, dtype=float).reshape(model.n, model.d)
    if p is not None:
        base.p = np.asarray(p, dtype=float).reshape(model.n, model.d)
    return State(base.q, base.p)


def load_config(path, overrides):
    if path is None:
        config = json.loads(json.dumps(_DEFAULT_CONFIG))
    else:
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            config = yaml.safe_load(text)
        else:
            config = json.loads(text)
        if config is None:
            config = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, raw = item.partition("=")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part} is not a mapping")
        node[parts[-1]] = value
    return config


# ---------------------------------------------------------------------------
# subcommand implementations: return (gate_passed, artifacts, summary)
# ---------------------------------------------------------------------------

def _run_validate(model, exp, seed, out, fmt_mode, threads):
    report = validate_assumptions(model, probe_count=int(exp.get("probe_count", 4096)),
                                  rng_seed=seed, tolerance=float(exp.get("tolerance", 1e-9)))
    art = write_json(out / "validation_report.json", report.to_dict())
    return report.passed, [art], {"passed": report.passed, "g2": report.g2_compliant}


def _run_simulate(model, exp, seed, out, fmt_mode, threads):
    cutoff = truncate_model(model, float(exp["R"]), probe=False).cutoff if "R" in exp else None
    kind = DriftKind(exp.get("kind", "relativistic"), cutoff=cutoff)
    scheme = Scheme(method=exp.get("method", "strang-split"), dt=float(exp.get("dt", 1e-3)))
    traj = simulate(model, kind, scheme, _x0(model, exp), float(exp.get("T", 1.0)), seed)
    art = write_trajectory(out / "trajectory.csv", traj, fmt_mode)
    return True, [art], {"nodes": len(traj), "rejections": int(traj.rejections[-1])}


def _run_couple(model, exp, seed, out, fmt_mode, threads):
    x0 = _x0(model, exp)
    cutoff = truncate_model(model, float(exp["R"]), probe=False).cutoff if "R" in exp else None
    dt = float(exp.get("dt", 1e-3))
    scheme = Scheme(method=exp.get("method", "strang-split"), dt=dt)
    if exp.get("pilot", False):
        scheme = Scheme(method=scheme.method,
                        dt=pilot_dt(model, scheme, x0, float(exp.get("T", 1.0)), seed,
                                    cutoff=cutoff))
    run = simulate_coupled(model, scheme, x0, float(exp.get("T", 1.0)),
                           float(exp.get("eps", model.epsilon)), seed, cutoff=cutoff)
    rel, lan = run.relativistic, run.langevin
    n, d = rel.q.shape[1:]
    cols = (["t", "sup_distance"]
            + [f"rel_q_{i}_{k}" for i in range(n) for k in range(d)]
            + [f"rel_p_{i}_{k}" for i in range(n) for k in range(d)]
            + [f"lan_q_{i}_{k}" for i in range(n) for k in range(d)]
            + [f"lan_p_{i}_{k}" for i in range(n) for k in range(d)])

    def rows():
        for i in range(len(rel.times)):
            yield ([rel.times[i], run.sup_distance[i]]
                   + list(rel.q[i].ravel()) + list(rel.p[i].ravel())
                   + list(lan.q[i].ravel()) + list(lan.p[i].ravel()))

    art = write_table(out / "coupled.csv", cols, rows(),
                      [f"epsilon={run.epsilon}", f"increments_sha256={run.increment_hash_relativistic}"],
                      fmt_mode)
    return run.coupled, [art], {"sup_distance": float(run.sup_distance[-1])}


def _run_newton_rate(model, exp, seed, out, fmt_mode, threads):
    eps_list = [float(e) for e in exp.get("eps_list", [1e-1, 1e-2, 1e-3, 1e-4])]
    n = int(exp.get("n", 1))
    fit = newtonian_rate_experiment(
        model, float(exp.get("R", 10.0)), _x0(model, exp), float(exp.get("T", 1.0)),
        eps_list, n, int(exp.get("n_seeds", 200)), seed, dt=float(exp.get("dt", 1e-4)))
    window = exp.get("slope_window", [0.8 * n, 1.2 * n])
    rows = zip(fit.eps, fit.statistic, fit.stderr, fit.n_ok, fit.n_failed)
    art1 = write_table(out / "rate.csv", ["epsilon", "statistic", "stderr", "n_ok", "n_failed"],
                       rows, [f"n={n}", f"seeds={fit.seeds}"], fmt_mode)
    art2 = write_json(out / "rate_fit.json", {"slope": fit.slope, "intercept": fit.intercept,
                                              "r2": fit.r2, "window": window, "n": n})
    passed = window[0] <= fit.slope <= window[1]
    return passed, [art1, art2], {"slope": fit.slope, "window": window}


def _run_prob_curve(model, exp, seed, out, fmt_mode, threads):
    curve = prob_convergence_experiment(
        model, _x0(model, exp), float(exp.get("T", 1.0)), float(exp.get("xi", 0.1)),
        [float(e) for e in exp.get("eps_list", [1e-1, 1e-2, 1e-3])],
        int(exp.get("n_seeds", 400)), seed, dt=float(exp.get("dt", 1e-3)))
    rows = zip(curve.eps, curve.p_hat, curve.ci_low, curve.ci_high, curve.n_ok, curve.n_failed)
    art1 = write_table(out / "prob_curve.csv",
                       ["epsilon", "p_hat", "ci_low", "ci_high", "n_ok", "n_failed"],
                       rows, [f"xi={curve.xi}"], fmt_mode)
    strict = all(b < a for a, b in zip(curve.p_hat, curve.p_hat[1:]))
    disjoint = curve.ci_low[0] > curve.ci_high[-1]
    art2 = write_json(out / "prob_trend.json",
                      {"consecutive_decreases": curve.consecutive_decreases,
                       "strictly_decreasing": strict, "endpoint_cis_disjoint": disjoint})
    passed = (strict and disjoint) if exp.get("require_strict", True) else True
    return passed, [art1, art2], {"p_hat": curve.p_hat, "strict": strict}


def _scan_params(model, exp, seed):
    keys = ("eps1", "kappa1") if model.n == 1 else ("A1", "A2", "kappaN")
    if any(k in exp for k in keys):
        if model.n == 1:
            return LyapunovParams1(eps1=float(exp.get("eps1", model.epsilon)),
                                   kappa1=float(exp.get("kappa1", 1.0)))
        return LyapunovParamsN(A1=float(exp.get("A1", 8.0)), A2=float(exp.get("A2", 1.0)),
                               kappaN=float(exp.get("kappaN", 1.0)))
    hyper = {}
    if model.n >= 2:
        hyper = {"A1": float(exp.get("A1", 8.0)), "A2": float(exp.get("A2", 1.0))}
    return auto_params(model, seed=seed, **hyper)


def _run_lyapunov_scan(model, exp, seed, out, fmt_mode, threads):
    params = _scan_params(model, exp, seed)
    report = drift_scan(model, params, float(exp.get("n", 1)), None,
                        int(exp.get("sample_count", 100000)), seed,
                        alpha=exp.get("alpha"))
    art = write_json(out / "drift_report.json", report.to_dict())
    return report.passed, [art], {"c": report.c, "C": report.C, "violations": report.violations}


def _run_tune(model, exp, seed, out, fmt_mode, threads):
    params, report = tune_constants(model, float(exp.get("n", 1)), int(exp.get("budget", 8)),
                                    seed, sample_count=int(exp.get("sample_count", 20000)))
    art = write_json(out / "tuned.json", {"params": params.to_dict(), "report": report.to_dict()})
    return report.passed, [art], {"c": report.c, "params": params.to_dict()}


def _run_sample_pi(model, exp, seed, out, fmt_mode, threads):
    sample = sample_stationary(model, int(exp.get("n_samples", 10000)),
                               chains=int(exp.get("chains", 24)),
                               burn_in=int(exp.get("burn_in", 2000)), seed=seed,
                               thin=int(exp.get("thin", 4)))
    art1 = write_samples(out / "samples.csv", sample, fmt_mode)
    art2 = write_json(out / "sampler_diagnostics.json", sample.diagnostics)
    return not sample.diagnostics["degenerate"], [art1, art2], sample.diagnostics


def _run_stationarity(model, exp, seed, out, fmt_mode, threads):
    factor = float(exp.get("mismatch_factor", 1.0))
    sampler_model = model.with_epsilon(min(1.0, model.epsilon * factor))
    sample = sample_stationary(sampler_model, int(exp.get("n_samples", 100000)),
                               chains=int(exp.get("chains", 24)), seed=seed)
    report = stationarity_check(model, default_bumps(model), sample)
    art = write_json(out / "stationarity.json",
                     {"report": report.to_dict(), "mismatch_factor": factor})
    expect = exp.get("expect", "pass" if factor == 1.0 else "fail")
    gate = report.passed if expect == "pass" else (not report.passed)
    return gate, [art], {"passed": report.passed, "expect": expect}


def _run_mixing(model, exp, seed, out, fmt_mode, threads):
    reference = sample_stationary(model, int(exp.get("n_reference", 100000)),
                                  seed=seed + 1)
    name = exp.get("observable", "tanh-energy")
    if name == "tanh-p":
        def f(q, p):
            return np.tanh(p[..., 0, 0])
    elif name == "tanh-energy":
        from .dynamics import potential_energy

        def f(q, p):
            pe = potential_energy(model, q)
            kin = np.sqrt(1.0 + model.epsilon * np.sum(p * p, axis=(-2, -1)))
            return np.tanh(model.epsilon * pe + kin - 1.2)
    else:
        raise ConfigError(f"experiment.observable: unknown observable {name!r}")
    curve = mixing_curve(model, f, _x0(model, exp),
                         [float(t) for t in exp.get("t_grid", [0.0, 0.5, 1.0, 2.0, 4.0, 8.0])],
                         int(exp.get("n_ens", 10000)), seed, reference,
                         dt=float(exp.get("dt", 2e-3)))
    rows = zip(curve.t_grid, curve.decay, curve.stderr)
    art1 = write_table(out / "mixing.csv", ["t", "decay", "stderr"], rows,
                       [f"pi_f={curve.pi_f}", f"observable={name}"], fmt_mode)
    art2 = write_json(out / "mixing_fit.json",
                      {"r_hat": curve.r_hat, "window": curve.fit_window,
                       "monotone_above_floor": curve.monotone_above_floor})
    passed = curve.monotone_above_floor and (curve.r_hat or 0.0) > 0.0
    return passed, [art1, art2], {"r_hat": curve.r_hat, "monotone": curve.monotone_above_floor}


def _run_control_check(model, exp, seed, out, fmt_mode, threads):
    n_trials = int(exp.get("n_trials", 20))
    rho = float(exp.get("rho", 0.05))
    ep_tol = float(exp.get("endpoint_tol", 1e-9))
    res_tol = float(exp.get("residual_tol", 1e-6))
    rng = substream(seed, 77)
    states = []
    for _ in range(n_trials):
        q0 = rng.standard_normal((model.n, model.d)) * 1.5
        for _ in range(64):
            from .dynamics import min_pair_distance
            if float(min_pair_distance(model, q0)) > 0.3:
                break
            q0 = rng.standard_normal((model.n, model.d)) * 1.5
        states.append(State(q0, rng.standard_normal((model.n, model.d)) * 2.0))

    def one(idx_state):
        idx, x0 = idx_state
        path = control_path(model, x0, rho=rho, seed=seed + idx)
        res = control_residual(model, path)
        dd = path.diagnostics
        return {
            "endpoint_q": dd["endpoint_error_q"], "endpoint_p": dd["endpoint_error_p"],
            "speed_times_sqrt_eps": float(np.sqrt(model.epsilon)) * dd["speed_sup"],
            "residual": res["residual_sup"], "rho": path.rho,
            "target_adapted": path.target_adapted, "shrinks": path.shrink_count,
        }

    rows = parallel_map(one, list(enumerate(states)), threads)
    ok = all(r["endpoint_q"] <= ep_tol and r["endpoint_p"] <= ep_tol
             and r["speed_times_sqrt_eps"] < 1.0 and r["residual"] <= res_tol
             for r in rows)
    art = write_json(out / "control_check.json", {"trials": rows, "passed": ok,
                                                  "tolerances": {"endpoint": ep_tol,
                                                                 "residual": res_tol}})
    return ok, [art], {"passed": ok, "n_trials": n_trials}


def _run_hypo_check(model, exp, seed, out, fmt_mode, threads):
    n_states = int(exp.get("n_states", 100))
    rng = substream(seed, 78)
    results = []
    families = exp.get("families", [model.singular.family])
    Ns = [int(x) for x in exp.get("Ns", [model.n])]
    ds = [int(x) for x in exp.get("ds", [model.d])]
    all_ok = True
    for family in families:
        for n in Ns:
            for d in ds:
                m = ModelSpec(n=n, d=d, epsilon=model.epsilon,
                              confining=model.confining,
                              singular=SingularSpec(family=family) if family != "none"
                              else SingularSpec(family="none"))
                q = rng.standard_normal((n_states, n, d)) * 1.5
                from .dynamics import min_pair_distance
                for _ in range(32):
                    bad = min_pair_distance(m, q) < 1e-2
                    if not np.any(bad):
                        break
                    q[bad] = rng.standard_normal((int(bad.sum()), n, d)) * 1.5
                p = rng.standard_normal((n_states, n, d)) * 2.0
                ranks, _ = hypoellipticity_ranks(m, q, p)
                full = int(2 * n * d)
                ok = bool(np.all(ranks == full))
                all_ok &= ok
                results.append({"family": family, "n": n, "d": d, "dim": full,
                                "min_rank": int(ranks.min()), "passed": ok})
    art = write_json(out / "hypoellipticity.json", {"cases": results, "passed": all_ok})
    return all_ok, [art], {"passed": all_ok}


def _run_lemma_a1(model, exp, seed, out, fmt_mode, threads):
    Ns = [int(x) for x in exp.get("Ns", [2, 3, 5])]
    gammas = [float(x) for x in exp.get("gammas", [0.25, 0.5, 1.0])]
    ss = [float(x) for x in exp.get("ss", [0.0, 1.0, 2.0])]
    n_trials = int(exp.get("n_trials", 100000))
    out_rows = []
    ok = True
    for N in Ns:
        for g in gammas:
            for s_exp in ss:
                census = lemma_a1_check(N, model.d, g, s_exp, n_trials, seed=seed)
                ok &= census["violations"] == 0
                out_rows.append(census)
    art = write_json(out / "lemma_a1.json", {"cases": out_rows, "passed": ok})
    return ok, [art], {"passed": ok}


def _run_lemma_a2(model, exp, seed, out, fmt_mode, threads):
    census = lemma_a2_fit(model, int(exp.get("n_trials", 100000)), seed=seed)
    ok = bool(census.get("feasible")) and census.get("violations", 1) == 0
    art = write_json(out / "lemma_a2.json", census)
    return ok, [art], census


def _run_gamma2(model, exp, seed, out, fmt_mode, threads):
    res = moment_uniformity_experiment(
        model, _x0(model, exp), float(exp.get("T", 1.0)),
        [float(e) for e in exp.get("eps_list", [1e-1, 1e-2, 1e-3])],
        int(exp.get("n_seeds", 500)), seed, dt=float(exp.get("dt", 1e-4)))
    rows = zip(res["eps"], res["mean_sup_gamma2"], res["stderr"], res["n_ok"])
    art1 = write_table(out / "gamma2.csv", ["epsilon", "mean_sup_gamma2", "stderr", "n_ok"],
                       rows, [], fmt_mode)
    art2 = write_json(out / "gamma2_fit.json", {"ratio": res["ratio"]})
    passed = res["ratio"] < float(exp.get("max_ratio", 2.0))
    return passed, [art1, art2], {"ratio": res["ratio"]}


_RUNNERS = {
    "validate": _run_validate,
    "simulate": _run_simulate,
    "couple": _run_couple,
    "newton-rate": _run_newton_rate,
    "prob-curve": _run_prob_curve,
    "lyapunov-scan": _run_lyapunov_scan,
    "tune": _run_tune,
    "sample-pi": _run_sample_pi,
    "stationarity": _run_stationarity,
    "mixing": _run_mixing,
    "control-check": _run_control_check,
    "hypo-check": _run_hypo_check,
    "lemma-a1": _run_lemma_a1,
    "lemma-a2": _run_lemma_a2,
    "gamma2-uniformity": _run_gamma2,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="relangevin",
        description="Relativistic N-particle Langevin laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _RUNNERS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--out", type=str, default=None)
        sp.add_argument("overrides", nargs="*", metavar="key=value",
                        help="dotted-key overrides applied after file parsing")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config, args.overrides)
        validate_config(config, args.subcommand)
        model = build_model(config)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    seed = args.seed if args.seed is not None else int(config.get("seed", 1234))
    out_root = (args.out or config.get("output", {}).get("directory")
                or os.environ.get("RELANGEVIN_OUT") or "out")
    out = Path(out_root) / args.subcommand
    out.mkdir(parents=True, exist_ok=True)
    fmt_mode = config.get("output", {}).get("format", "csv")
    exp = config.get("experiment", {})

    t0 = time.time()
    try:
        passed, artifacts, summary = _RUNNERS[args.subcommand](
            model, exp, seed, out, fmt_mode, max(1, args.threads))
    except (ExperimentFailure, IntegrationFailure) as exc:
        census = getattr(exc, "census", None) or getattr(exc, "diagnostics", {}) or {}
        census_path = write_json(out / "census.json", {"error": str(exc), "census": census})
        print(f"experiment failed: {exc} (census: {census_path})", file=sys.stderr)
        return 1
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    write_manifest(out, config, seed, artifacts, time.time() - t0)
    print(json.dumps({"subcommand": args.subcommand, "passed": bool(passed),
                      "summary": summary}, default=str, sort_keys=True))
    if not passed:
        write_json(out / "census.json", {"error": "declared gate failed", "summary": summary})
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
