"""Newtonian-limit experiments: truncated Lipschitz systems, epsilon-scaling
rate fits, convergence-in-probability curves, and the moment functionals
Gamma1/Gamma2.

The coupled statistics are deterministic functions of (master_seed, eps):
seed k draws the same Brownian block at every eps, so comparisons across the
eps grid are paired.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import DriftKind, min_pair_distance, potential_energy, smoothstep5, total_forces
from .errors import ExperimentFailure, ParameterError
from .integrate import Scheme, Trajectory, batch_paths, coupled_sup_batch
from .model import ModelSpec, State
from .rng import substream

__all__ = [
    "CutoffSpec",
    "TruncatedPair",
    "RateFit",
    "ProbCurve",
    "MomentSeries",
    "truncate_model",
    "newtonian_rate_experiment",
    "prob_convergence_experiment",
    "moment_monitor",
    "moment_uniformity_experiment",
    "wilson_interval",
]

_LIPSCHITZ_KEY = 41
_GAMMA_KEY = 42

_Z95 = 1.959963984540054  # two-sided 95% normal quantile


@dataclass(frozen=True)
class CutoffSpec:
    """Smooth cutoff: 1 on [-R, R], 0 outside [-R-1, R+1], quintic seams."""

    R: float

    def __post_init__(self):
        if self.R <= 2.0:
            raise ParameterError(f"cutoff: need R > 2, got {self.R}")

    def profile(self, t):
        a = np.abs(np.asarray(t, dtype=float))
        return 1.0 - smoothstep5(a - self.R)


@dataclass
class TruncatedPair:
    relativistic: DriftKind
    langevin: DriftKind
    cutoff: CutoffSpec
    force_bound: Optional[float] = None
    lipschitz_constant: Optional[float] = None


def truncate_model(model: ModelSpec, R: float, probe: bool = True,
                   probe_count: int = 2048, seed: int = 0) -> TruncatedPair:
    """Build the truncated drift pair; optionally probe the global force
    bound and a Lipschitz constant of the truncated field (reported only)."""
    cutoff = CutoffSpec(R)
    pair = TruncatedPair(
        relativistic=DriftKind("relativistic", cutoff=cutoff),
        langevin=DriftKind("langevin", cutoff=cutoff),
        cutoff=cutoff,
    )
    if not probe:
        return pair
    rng = substream(seed, _LIPSCHITZ_KEY)
    n, d = model.n, model.d
    q = rng.uniform(-R - 2.0, R + 2.0, size=(probe_count, n, d))
    ok = min_pair_distance(model, q) > model.delta_floor
    q = q[ok]
    f = total_forces(model, q, cutoff)
    pair.force_bound = float(np.max(np.linalg.norm(f, axis=-1)))
    half = len(q) // 2
    a, b = q[:half], q[half:2 * half]
    fa, fb = total_forces(model, a, cutoff), total_forces(model, b, cutoff)
    num = np.sqrt(np.sum((fa - fb) ** 2, axis=(-2, -1)))
    den = np.maximum(np.sqrt(np.sum((a - b) ** 2, axis=(-2, -1))), 1e-12)
    pair.lipschitz_constant = float(np.max(num / den))
    return pair


# ---------------------------------------------------------------------------
# rate experiment
# ---------------------------------------------------------------------------

@dataclass
class RateFit:
    eps: list
    statistic: list
    stderr: list
    n_ok: list
    n_failed: list
    slope: float
    intercept: float
    r2: float
    n: float
    seeds: int
    master_seed: int
    dt: float

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


def _check_eps_grid(eps_list):
    eps = [float(e) for e in eps_list]
    if any(e <= 0 or e > 1 for e in eps):
        raise ParameterError("eps grid: entries must lie in (0, 1]")
    uniq = sorted(set(eps))
    if len(uniq) < 2 or uniq[-1] / uniq[0] < 100.0 * (1 - 1e-12):
        # precondition gate of the experiment itself: the fit is undefined
        raise ExperimentFailure("eps grid: need >= 2 distinct values spanning >= 2 decades",
                                census={"eps_list": eps})
    return eps


def newtonian_rate_experiment(model: ModelSpec, R: float, x0: State, T: float,
                              eps_list: Sequence[float], n: int, n_seeds: int,
                              master_seed: int, dt: float = 1e-4,
                              method: str = "strang-split") -> RateFit:
    """Fit log E sup (|dq|^n + |dp|^n) against log eps for the truncated pair.

    Failed legs are excluded with a census; fewer than half the seeds
    surviving at any eps aborts the experiment.
    """
    eps = _check_eps_grid(eps_list)
    pair = truncate_model(model, R, probe=False)
    scheme = Scheme(method=method, dt=dt)
    stats, errs, oks, fails = [], [], [], []
    for e in eps:
        out = coupled_sup_batch(model, scheme, x0, T, e, master_seed, n_seeds,
                                powers=(n,), cutoff=pair.cutoff)
        ok = out["ok"]
        vals = out["sup_pow"][n][ok]
        if vals.size < max(1, n_seeds // 2):
            raise ExperimentFailure(
                f"newtonian rate: only {vals.size}/{n_seeds} seeds survived at eps={e}",
                census={"eps": e, "n_ok": int(vals.size), "n_failed": int(n_seeds - vals.size)},
            )
        stats.append(float(vals.mean()))
        errs.append(float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0)
        oks.append(int(vals.size))
        fails.append(int(n_seeds - vals.size))
    lx = np.log(np.asarray(eps))
    ly = np.log(np.asarray(stats))
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(eps=eps, statistic=stats, stderr=errs, n_ok=oks, n_failed=fails,
                   slope=float(slope), intercept=float(intercept), r2=r2, n=n,
                   seeds=n_seeds, master_seed=master_seed, dt=dt)


# ---------------------------------------------------------------------------
# convergence in probability
# ---------------------------------------------------------------------------

def wilson_interval(k: int, n: int, z: float = _Z95):
    """95% Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    phat = k / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass
class ProbCurve:
    eps: list
    p_hat: list
    ci_low: list
    ci_high: list
    n_ok: list
    n_failed: list
    xi: float
    consecutive_decreases: int
    master_seed: int
    dt: float

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


def prob_convergence_experiment(model: ModelSpec, x0: State, T: float, xi: float,
                                eps_list: Sequence[float], n_seeds: int,
                                master_seed: int, dt: float = 1e-3,
                                method: str = "strang-split") -> ProbCurve:
    """Empirical P(sup |dq|+|dp| > xi) per eps, untruncated coupling.

    The paper gives no rate for N >= 2, so only the curve and a
    consecutive-decrease trend statistic are reported.
    """
    if xi < 0:
        raise ParameterError("prob curve: need xi >= 0")
    eps = [float(e) for e in eps_list]
    scheme = Scheme(method=method, dt=dt)
    p_hat, lo, hi, oks, fails = [], [], [], [], []
    for e in eps:
        out = coupled_sup_batch(model, scheme, x0, T, e, master_seed, n_seeds,
                                powers=(), cutoff=None)
        ok = out["ok"]
        sup = out["sup_plain"][ok]
        n_ok = int(sup.size)
        if n_ok < max(1, n_seeds // 2):
            raise ExperimentFailure(
                f"prob curve: only {n_ok}/{n_seeds} seeds survived at eps={e}",
                census={"eps": e, "n_ok": n_ok},
            )
        k = int(np.sum(sup > xi)) if np.isfinite(xi) else 0
        if xi == 0.0:
            k = n_ok  # sup-distance is a.s. positive
        ci = wilson_interval(k, n_ok)
        p_hat.append(k / n_ok)
        lo.append(ci[0])
        hi.append(ci[1])
        oks.append(n_ok)
        fails.append(int(n_seeds - n_ok))
    dec = sum(1 for a, b in zip(p_hat, p_hat[1:]) if b < a)
    return ProbCurve(eps=eps, p_hat=p_hat, ci_low=lo, ci_high=hi, n_ok=oks,
                     n_failed=fails, xi=xi, consecutive_decreases=dec,
                     master_seed=master_seed, dt=dt)


# ---------------------------------------------------------------------------
# moment functionals
# ---------------------------------------------------------------------------

@dataclass
class MomentSeries:
    times: np.ndarray
    values: np.ndarray
    sup: float
    functional: str
    flagged: int = 0

    def to_dict(self):
        return {"functional": self.functional, "sup": self.sup, "flagged": self.flagged,
                "times": self.times.tolist(), "values": self.values.tolist()}


def _gamma1(model: ModelSpec, q, p):
    return potential_energy(model, q) + 0.5 * np.sum(p * p, axis=(-2, -1))


def _gamma2(model: ModelSpec, q, p, eps):
    pe = potential_energy(model, q)
    s = np.sqrt(1.0 + eps * np.sum(p[..., 0, :] ** 2, axis=-1))
    return 0.5 * eps * pe ** 2 + pe * s + 0.5 * np.sum(p * p, axis=(-2, -1))


def moment_monitor(model: ModelSpec, kind: DriftKind, trajectory: Trajectory) -> MomentSeries:
    """Gamma1 along langevin runs; Gamma2 along single-particle relativistic
    runs (the uniform-in-eps moment functional); per-run sup over [0, T]."""
    q, p = trajectory.q, trajectory.p
    finite = np.all(np.isfinite(q), axis=(-2, -1)) & np.all(np.isfinite(p), axis=(-2, -1))
    flagged = int(np.sum(~finite))
    if kind.tag == "langevin":
        vals = _gamma1(model, q, p)
        name = "gamma1"
    else:
        if model.n != 1:
            raise ParameterError("Gamma2 is the single-particle relativistic functional (n=1)")
        vals = _gamma2(model, q, p, model.epsilon)
        name = "gamma2"
    good = vals[finite]
    return MomentSeries(times=trajectory.times, values=vals,
                        sup=float(np.max(good)), functional=name, flagged=flagged)


def moment_uniformity_experiment(model: ModelSpec, x0: State, T: float,
                                 eps_list: Sequence[float], n_seeds: int,
                                 master_seed: int, dt: float = 1e-4,
                                 method: str = "strang-split") -> dict:
    """Ensemble mean of sup Gamma2 on single-particle relativistic runs,
    one batch per eps; reports the max/min ratio across the eps grid."""
    if model.n != 1:
        raise ParameterError("moment uniformity experiment is single-particle")
    means, ses, oks = [], [], []
    for e in eps_list:
        m_eps = model.with_epsilon(float(e))
        kind = DriftKind("relativistic")
        n_steps = max(1, int(round(T / dt)))
        running = {"sup": np.zeros(n_seeds)}

        def hook(k, t, q, p, ok, running=running, m_eps=m_eps, e=e):
            g = _gamma2(m_eps, q, p, float(e))
            np.maximum(running["sup"], np.where(ok, g, running["sup"]), out=running["sup"])

        ok = batch_paths(m_eps, kind, method, x0, T / n_steps, n_steps, master_seed,
                         n_seeds, hook)
        vals = running["sup"][ok]
        if vals.size < max(1, n_seeds // 2):
            raise ExperimentFailure(f"gamma2 uniformity: too many failures at eps={e}",
                                    census={"eps": float(e), "n_ok": int(vals.size)})
        means.append(float(vals.mean()))
        ses.append(float(vals.std(ddof=1) / math.sqrt(vals.size)))
        oks.append(int(vals.size))
    ratio = max(means) / min(means)
    return {"eps": [float(e) for e in eps_list], "mean_sup_gamma2": means,
            "stderr": ses, "n_ok": oks, "ratio": ratio, "dt": dt,
            "master_seed": master_seed}
