"""Reference sampling from the relativistic Maxwellian, weak stationarity
checks, mixing-curve estimation, a numeric hypoellipticity check, explicit
control paths, and property checks for the two auxiliary inequalities on
singular configurations.

Sampler design: the position marginal (prop. to exp(-sum U - sum G)) is drawn
by gradient-informed Metropolis chains; the momentum marginal factorizes per
particle with density prop. to exp(-(1/eps) sqrt(1+eps|p|^2)), whose tails
are exponential with scale sqrt(eps) -- Gaussian proposals cannot dominate
them, so momenta use independence Metropolis with an exponential-radial
proposal of scale max(sqrt(eps), 1) (>= sqrt(eps) keeps the weight bounded;
the floor keeps body acceptance healthy as eps -> 0).
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .dynamics import (
    DriftKind,
    Observable,
    drift_arrays,
    generator_apply,
    min_pair_distance,
    potential_energy,
    smoothstep5,
    smoothstep5_d1,
    smoothstep5_d2,
    total_forces,
)
from .errors import ExperimentFailure, ParameterError
from .integrate import batch_paths
from .model import ModelSpec, State, default_state, relativistic_velocity
from .rng import substream

__all__ = [
    "StationarySample",
    "ControlPath",
    "sample_stationary",
    "bump_observable",
    "default_bumps",
    "stationarity_check",
    "StationarityReport",
    "mixing_curve",
    "MixingCurve",
    "hypoellipticity_check",
    "hypoellipticity_ranks",
    "RankReport",
    "control_path",
    "control_residual",
    "lemma_a1_check",
    "lemma_a2_fit",
    "ks_2sample_pvalue",
    "ess",
]

_QCHAIN_KEY = 51
_PSLOT_KEY = 52
_MIX_KEY = 53
_A1_KEY = 54
_A2_KEY = 55
_CTRL_KEY = 56

_SQRT2 = math.sqrt(2.0)


def _smoothstep7(u):
    """Seventh-order smoothstep: C^3 with flat third derivatives at 0 and 1.

    The control-path gluing needs C^3 seams: a C^2 blend leaves jumps in the
    second derivative of the momentum path, and the residual check's central
    differences then stall at O(h |jump|).  Max slope 35/16 <= 10.
    """
    u = np.clip(u, 0.0, 1.0)
    return u ** 4 * (35.0 + u * (-84.0 + u * (70.0 - 20.0 * u)))


def _smoothstep7_d1(u):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 140.0 * (u * (1.0 - u)) ** 3, 0.0)


def _smoothstep7_d2(u):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 420.0 * u ** 2 * (1.0 - u) ** 2 * (1.0 - 2.0 * u), 0.0)


# ---------------------------------------------------------------------------
# effective sample size
# ---------------------------------------------------------------------------

def ess(series: np.ndarray) -> float:
    """ESS via the integrated autocorrelation time (initial-positive-pair
    truncation); returns len(series) for white noise."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = float(np.dot(x, x) / n)
    if var <= 0:
        return float(n)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(f * np.conjugate(f), nfft)[:n].real
    acf /= acf[0]
    tau = 1.0
    k = 1
    while k + 1 < n:
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
        k += 2
    return float(n / max(tau, 1.0))


def ks_2sample_pvalue(x, y) -> float:
    """Two-sample Kolmogorov-Smirnov asymptotic p-value."""
    x = np.sort(np.asarray(x, dtype=float))
    y = np.sort(np.asarray(y, dtype=float))
    nx, ny = len(x), len(y)
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / nx
    fy = np.searchsorted(y, grid, side="right") / ny
    d = float(np.max(np.abs(fx - fy)))
    ne = math.sqrt(nx * ny / (nx + ny))
    lam = (ne + 0.12 + 0.11 / ne) * d
    terms = [2.0 * (-1) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam) for k in range(1, 101)]
    return float(min(max(sum(terms), 0.0), 1.0))


# ---------------------------------------------------------------------------
# stationary sampling
# ---------------------------------------------------------------------------

@dataclass
class StationarySample:
    """Approximate draws from the stationary measure with chain provenance."""

    q: np.ndarray  # (S, N, d)
    p: np.ndarray  # (S, N, d)
    chains: int
    per_chain: int
    diagnostics: dict
    seed: int
    epsilon: float

    @property
    def n_samples(self) -> int:
        return self.q.shape[0]

    def chain_view(self, values: np.ndarray) -> np.ndarray:
        """Reshape per-sample scalars to (chains, per_chain)."""
        return np.asarray(values).reshape(self.chains, self.per_chain)


def _chain_inits(model: ModelSpec, chains: int, rng):
    """Lattice starts, one symmetry image per chain.

    Chains cycle through particle permutations and global sign flips: both
    are symmetries of the target, and for d = 1 (where the collision-free
    domain splits into ordering sectors that no chain can cross) the cycling
    restores exchangeability and covers the two half-lines of the N = 1
    singular domain.
    """
    base = default_state(model).q
    n = model.n
    perms = list(itertools.permutations(range(n)))
    out = np.zeros((chains, n, model.d))
    for c in range(chains):
        perm = perms[c % len(perms)]
        sign = 1.0 if (c // len(perms)) % 2 == 0 else -1.0
        cfg = sign * base[list(perm)]
        for _ in range(64):
            trial = cfg + 0.25 * rng.standard_normal((n, model.d))
            if min_pair_distance(model, trial) > max(model.delta_floor, 1e-3):
                break
        out[c] = trial
    return out


def _mala_sweep(model, Q, logpi, grads, h, rng):
    C = Q.shape[0]
    xi = rng.standard_normal(Q.shape)
    mean_fwd = Q + 0.5 * h * h * grads
    Qp = mean_fwd + h * xi
    okp = np.all(np.isfinite(Qp), axis=(-2, -1)) & (min_pair_distance(model, Qp) > model.delta_floor)
    logpi_p = np.full(C, -np.inf)
    grads_p = np.zeros_like(Q)
    if np.any(okp):
        logpi_p[okp] = -potential_energy(model, Qp[okp])
        grads_p[okp] = total_forces(model, Qp[okp])
    mean_rev = Qp + 0.5 * h * h * grads_p
    fwd = np.sum((Qp - mean_fwd) ** 2, axis=(-2, -1))
    rev = np.sum((Q - mean_rev) ** 2, axis=(-2, -1))
    with np.errstate(invalid="ignore"):
        log_alpha = (logpi_p - logpi) + (fwd - rev) / (2.0 * h * h)
    accept = okp & (np.log(rng.random(C)) < log_alpha)
    Q[accept] = Qp[accept]
    logpi[accept] = logpi_p[accept]
    grads[accept] = grads_p[accept]
    return float(np.mean(accept))


def _sample_momenta(model, count, rng, max_rounds: int = 4000):
    """Exact rejection sampling of the per-particle momentum marginal.

    Proposal: radius ~ Gamma(d, b) with a uniform direction, i.e. the
    exponential-radial density prop. to exp(-|p|/b); b >= sqrt(eps) keeps the
    weight w = target/proposal bounded, so rejection is exact (the floor at 1
    keeps the body acceptance healthy as eps -> 0).
    """
    eps = model.epsilon
    d = model.d
    b = max(math.sqrt(eps), 1.0)

    def logw_radius(r):
        return -np.sqrt(1.0 + eps * r * r) / eps + r / b

    grid = np.geomspace(1e-8, 1e4, 8192)
    log_m = float(np.max(logw_radius(grid))) + 1e-3  # headroom keeps M >= sup w

    out = np.empty((count, d))
    have = 0
    accepted = 0
    proposed = 0
    for _ in range(max_rounds):
        m = max(2048, int(1.5 * (count - have)))
        radius = rng.gamma(shape=d, scale=b, size=m)
        direction = rng.standard_normal((m, d))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        lw = logw_radius(radius) - log_m
        if np.any(lw > 0):
            raise ExperimentFailure("momentum rejection bound violated; enlarge the margin")
        keep = np.log(rng.random(m)) < lw
        proposed += m
        accepted += int(keep.sum())
        take = min(int(keep.sum()), count - have)
        out[have:have + take] = (radius[:, None] * direction)[keep][:take]
        have += take
        if have >= count:
            break
    if have < count:
        raise ExperimentFailure(
            f"momentum rejection sampler starved ({have}/{count}); acceptance "
            f"{accepted / max(proposed, 1):.2e}")
    return out, accepted / max(proposed, 1)


def sample_stationary(model: ModelSpec, n_samples: int, chains: int = 24,
                      burn_in: int = 2000, seed: int = 0, thin: int = 4) -> StationarySample:
    """Draw from the stationary measure: MALA on the position marginal,
    exact rejection sampling on the momentum marginal.

    The sample count is rounded up to a multiple of ``chains`` so chain
    symmetry images stay balanced.  Degenerate sampling (acceptance below 1%
    or tiny ESS) is flagged in the diagnostics, never raised.
    """
    if n_samples < 1:
        raise ParameterError("sample_stationary: need n_samples >= 1")
    per_chain = int(math.ceil(n_samples / chains))
    rng_q = substream(seed, _QCHAIN_KEY)
    rng_p = substream(seed, _PSLOT_KEY)

    Q = _chain_inits(model, chains, rng_q)
    logpi = -potential_energy(model, Q)
    grads = total_forces(model, Q)
    h = 0.25 / math.sqrt(max(model.n * model.d, 1))
    acc_hist = []
    for sweep in range(burn_in):
        acc = _mala_sweep(model, Q, logpi, grads, h, rng_q)
        acc_hist.append(acc)
        h *= math.exp(0.05 * (acc - 0.574))
        h = min(max(h, 1e-6), 10.0)
    kept_q = np.zeros((chains, per_chain, model.n, model.d))
    acc_run = 0.0
    for j in range(per_chain * thin):
        acc_run += _mala_sweep(model, Q, logpi, grads, h, rng_q)
        if j % thin == thin - 1:
            kept_q[:, j // thin] = Q
    acc_run /= max(per_chain * thin, 1)

    total = chains * per_chain
    P, p_acc = _sample_momenta(model, total * model.n, rng_p)
    p = P.reshape(total, model.n, model.d)
    q = kept_q.reshape(total, model.n, model.d)

    phi_chain = np.stack([potential_energy(model, kept_q[c]) for c in range(chains)])
    ess_chain = np.array([ess(phi_chain[c]) for c in range(chains)])
    ess_total = float(ess_chain.sum())
    warnings = []
    degenerate = False
    if acc_run < 0.01 or p_acc < 0.01:
        degenerate = True
        warnings.append(f"acceptance below 1% (q {acc_run:.3f}, p {p_acc:.3f})")
    if ess_total < 10.0 * chains:
        degenerate = True
        warnings.append(f"position ESS too small ({ess_total:.1f})")
    diagnostics = {
        "q_acceptance": acc_run,
        "q_step": h,
        "p_acceptance": p_acc,
        "p_proposal_scale": max(math.sqrt(model.epsilon), 1.0),
        "ess_q_total": ess_total,
        "ess_q_min_chain": float(ess_chain.min()),
        "burn_in": burn_in,
        "thin": thin,
        "degenerate": degenerate,
        "warnings": warnings,
    }
    return StationarySample(q=q, p=p, chains=chains, per_chain=per_chain,
                            diagnostics=diagnostics, seed=seed, epsilon=model.epsilon)


# ---------------------------------------------------------------------------
# compactly supported bump observables
# ---------------------------------------------------------------------------

def _bump_parts(u):
    """psi(u) = exp(1 - 1/(1-u)) on u < 1 (psi(0)=1), with psi', psi''."""
    u = np.asarray(u, dtype=float)
    inside = u < 1.0 - 1e-9
    w = np.where(inside, 1.0 - u, 1.0)
    val = np.where(inside, np.exp(1.0 - 1.0 / w), 0.0)
    d1 = np.where(inside, -val / w ** 2, 0.0)
    d2 = np.where(inside, val * (1.0 / w ** 4 - 2.0 / w ** 3), 0.0)
    return val, d1, d2


def bump_observable(model: ModelSpec, center_p=None, radius_p: float = 1.0,
                    center_q=None, radius_q: float = 0.5, name: str = "bump",
                    particle: Optional[int] = None) -> Observable:
    """Smooth compactly supported bump, analytic derivatives throughout.

    phi = psi(|q - cq|^2/rq^2) * psi(|p - cp|^2/rp^2) with either factor
    optional; the q-factor must sit clear of the collision set.  When
    ``particle`` is given the momentum factor watches only that particle's
    momentum block (center_p is then a d-vector).
    """
    cp = None if center_p is None else np.asarray(center_p, dtype=float)
    cq = None if center_q is None else np.asarray(center_q, dtype=float)
    if cq is not None:
        clearance = float(min_pair_distance(model, cq))
        if clearance - 2.0 * radius_q <= 1e-2:
            raise ParameterError(
                f"bump {name!r}: q-support reaches within {clearance - 2 * radius_q:.3g} "
                "of the collision set")
    nd_p = model.d if particle is not None else model.n * model.d

    def _z_p(p):
        if particle is not None:
            return p[..., particle, :] - cp
        return p - cp

    def parts(q, p):
        if cq is None:
            vq, dq1, dq2, zq = 1.0, 0.0, 0.0, None
        else:
            zq = q - cq
            uq = np.sum(zq * zq, axis=(-2, -1)) / radius_q ** 2
            vq, dq1, dq2 = _bump_parts(uq)
        if cp is None:
            vp, dp1, dp2, zp = 1.0, 0.0, 0.0, None
        else:
            zp = _z_p(p)
            axes = (-2, -1) if particle is None else (-1,)
            up = np.sum(zp * zp, axis=axes) / radius_p ** 2
            vp, dp1, dp2 = _bump_parts(up)
        return vq, dq1, dq2, zq, vp, dp1, dp2, zp

    def f(q, p):
        vq, _, _, _, vp, _, _, _ = parts(q, p)
        return vq * vp

    def grad_q(q, p):
        vq, dq1, _, zq, vp, _, _, _ = parts(q, p)
        if zq is None:
            return np.zeros_like(q)
        return np.asarray(vp * dq1)[..., None, None] * (2.0 / radius_q ** 2) * zq

    def grad_p(q, p):
        vq, _, _, _, vp, dp1, _, zp = parts(q, p)
        if zp is None:
            return np.zeros_like(p)
        coef = np.asarray(vq * dp1)[..., None, None] * (2.0 / radius_p ** 2)
        if particle is None:
            return coef * zp
        out = np.zeros_like(p)
        out[..., particle, :] = coef[..., 0, :] * zp
        return out

    def lap_p(q, p):
        vq, _, _, _, vp, dp1, dp2, zp = parts(q, p)
        if zp is None:
            return np.zeros(np.asarray(q).shape[:-2])
        z2 = np.sum(zp * zp, axis=(-2, -1)) if particle is None else np.sum(zp * zp, axis=-1)
        return vq * (dp2 * 4.0 * z2 / radius_p ** 4 + dp1 * 2.0 * nd_p / radius_p ** 2)

    return Observable(f=f, grad_q=grad_q, grad_p=grad_p, lap_p=lap_p, name=name)


def default_bumps(model: ModelSpec) -> List[Observable]:
    """Five bumps: momentum-only and mixed position-momentum, centers spread
    so both integration-by-parts identities are exercised."""
    n, d = model.n, model.d
    base_q = default_state(model).q

    def pconf(val):
        c = np.zeros((n, d))
        c[:, 0] = val
        return c

    bumps = [
        bump_observable(model, center_p=pconf(0.9), radius_p=1.4, name="p-bump+"),
        bump_observable(model, center_p=pconf(-0.9), radius_p=1.4, name="p-bump-"),
        # far tail bump on one particle's momentum: low variance under the
        # true density, sharply sensitive to the kinetic factor's epsilon
        bump_observable(model, center_p=np.concatenate([[4.5], np.zeros(d - 1)]),
                        radius_p=2.5, particle=0, name="p-bump-far"),
        bump_observable(model, center_p=pconf(0.5), radius_p=2.0,
                        center_q=base_q, radius_q=0.35, name="qp-bump"),
        bump_observable(model, center_p=np.zeros((n, d)), radius_p=1.0,
                        center_q=base_q * 1.5 + 0.2, radius_q=0.3, name="qp-bump-off"),
    ]
    return bumps


@dataclass
class StationarityReport:
    results: list
    passed: bool
    n_samples: int
    epsilon: float

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


def stationarity_check(model: ModelSpec, phis: Sequence[Observable],
                       sample: StationarySample) -> StationarityReport:
    """Weak stationarity: the sample mean of L phi must vanish within 3 SE.

    Standard errors come from chain batch means, which absorbs the position
    chains' autocorrelation.
    """
    results = []
    for phi in phis:
        vals = generator_apply(model, phi, sample.q, sample.p)
        by_chain = sample.chain_view(vals).mean(axis=1)
        mean = float(by_chain.mean())
        se = float(by_chain.std(ddof=1) / math.sqrt(sample.chains))
        passed = abs(mean) <= 3.0 * se
        results.append({"name": phi.name, "mean": mean, "se": se,
                        "pass": bool(passed), "n": sample.n_samples})
    return StationarityReport(results=results, passed=all(r["pass"] for r in results),
                              n_samples=sample.n_samples, epsilon=model.epsilon)


# ---------------------------------------------------------------------------
# mixing curve
# ---------------------------------------------------------------------------

@dataclass
class MixingCurve:
    t_grid: list
    decay: list
    stderr: list
    pi_f: float
    pi_f_se: float
    r_hat: Optional[float]
    fit_window: list
    monotone_above_floor: bool
    n_ok: int
    n_ens: int
    seed: int

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


def mixing_curve(model: ModelSpec, f: Callable, x0: State, t_grid: Sequence[float],
                 n_ens: int, seed: int, reference: StationarySample,
                 dt: float = 1e-3, method: str = "strang-split") -> MixingCurve:
    """Decay of |E f(X_t) - pi(f)| with MC error bars and a log-log fit of
    the window above 3x the noise floor; the fitted exponent is reported,
    the theory's any-order claim is not asserted."""
    t_grid = sorted(float(t) for t in t_grid)
    if not t_grid or t_grid[0] < 0:
        raise ParameterError("mixing_curve: need a nonnegative time grid")
    T = t_grid[-1]
    n_steps = max(1, int(round(T / dt)))
    dt = T / n_steps if T > 0 else dt
    node_of = {int(round(t / dt)): t for t in t_grid}

    pi_vals = np.asarray(f(reference.q, reference.p), dtype=float)
    by_chain = reference.chain_view(pi_vals).mean(axis=1)
    pi_f = float(by_chain.mean())
    pi_se = float(by_chain.std(ddof=1) / math.sqrt(reference.chains))

    means, ses = {}, {}

    def hook(k, t, q, p, ok):
        if k in node_of:
            vals = np.asarray(f(q, p), dtype=float)[ok]
            means[k] = float(vals.mean())
            ses[k] = float(vals.std(ddof=1) / math.sqrt(max(vals.size, 2)))

    ok = batch_paths(model, DriftKind("relativistic"), method, x0, dt, n_steps,
                     seed, n_ens, hook)
    n_ok = int(ok.sum())
    decay, errs = [], []
    for t in t_grid:
        k = int(round(t / dt))
        decay.append(abs(means[k] - pi_f))
        errs.append(math.sqrt(ses[k] ** 2 + pi_se ** 2))
    floor = [3.0 * e for e in errs]
    window = [i for i, (dv, fl) in enumerate(zip(decay, floor)) if dv > fl and t_grid[i] >= 0]
    monotone = all(decay[a] > decay[b] for a, b in zip(window, window[1:]))
    r_hat = None
    fit_ts = []
    if len(window) >= 2:
        lx = np.log1p([t_grid[i] for i in window])
        ly = np.log([decay[i] for i in window])
        slope, _ = np.polyfit(lx, ly, 1)
        r_hat = -float(slope)
        fit_ts = [t_grid[i] for i in window]
    return MixingCurve(t_grid=t_grid, decay=decay, stderr=errs, pi_f=pi_f,
                       pi_f_se=pi_se, r_hat=r_hat, fit_window=fit_ts,
                       monotone_above_floor=monotone, n_ok=n_ok, n_ens=n_ens, seed=seed)


# ---------------------------------------------------------------------------
# hypoellipticity
# ---------------------------------------------------------------------------

@dataclass
class RankReport:
    dim: int
    rank: int
    singular_values: list
    passed: bool

    def to_dict(self):
        return dataclasses.asdict(self)


def hypoellipticity_ranks(model: ModelSpec, q, p, zero_q_block: bool = False):
    """Numerical rank of span{d/dp_i} + {[d/dp_i, drift]} at each state.

    The bracket of a constant momentum field with the drift is the drift
    Jacobian applied to that direction, computed here by central differences.
    ``zero_q_block`` artificially kills the position components of the
    brackets (negative control: the rank collapses to N d).
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    squeeze = q.ndim == 2
    if squeeze:
        q, p = q[None], p[None]
    B = q.shape[0]
    n, d = model.n, model.d
    nd = n * d
    kind = DriftKind("relativistic")
    h = 1e-5 * (1.0 + np.sqrt(np.sum(q * q, axis=(-2, -1)) + np.sum(p * p, axis=(-2, -1))))
    cols = np.zeros((B, 2 * nd, nd))
    for i in range(n):
        for k in range(d):
            e = np.zeros((n, d))
            e[i, k] = 1.0
            hq = h[:, None, None]
            dq_plus, dp_plus = drift_arrays(kind, model, q, p + hq * e)
            dq_minus, dp_minus = drift_arrays(kind, model, q, p - hq * e)
            col_q = (dq_plus - dq_minus) / (2.0 * hq)
            col_p = (dp_plus - dp_minus) / (2.0 * hq)
            j = i * d + k
            cols[:, :nd, j] = col_q.reshape(B, nd)
            cols[:, nd:, j] = col_p.reshape(B, nd)
    if zero_q_block:
        cols[:, :nd, :] = 0.0
    momentum_block = np.zeros((B, 2 * nd, nd))
    momentum_block[:, nd:, :] = np.eye(nd)
    M = np.concatenate([momentum_block, cols], axis=2)
    sv = np.linalg.svd(M, compute_uv=False)
    ranks = np.sum(sv > 1e-8 * sv[:, :1], axis=1)
    if squeeze:
        return int(ranks[0]), sv[0]
    return ranks, sv


def hypoellipticity_check(model: ModelSpec, x: State, zero_q_block: bool = False) -> RankReport:
    rank, sv = hypoellipticity_ranks(model, x.q, x.p, zero_q_block=zero_q_block)
    dim = 2 * model.n * model.d
    return RankReport(dim=dim, rank=int(rank), singular_values=sv.tolist(),
                      passed=bool(rank == dim))


# ---------------------------------------------------------------------------
# control problem
# ---------------------------------------------------------------------------

@dataclass
class ControlPath:
    times: np.ndarray
    q: np.ndarray  # (m, N, d)
    p: np.ndarray
    controls: np.ndarray  # integrated controls U_i(s), (m, N, d)
    control_rate: np.ndarray  # u_i(s) = U_i'(s), stored for convenience
    rho: float
    epsilon: float
    T: float
    target: np.ndarray
    target_adapted: bool
    shrink_count: int
    diagnostics: dict
    segments: list = field(default_factory=list)  # uniform-grid index ranges


def _control_target(model: ModelSpec, q0: np.ndarray):
    """Spread target (1-i) e1 per particle; the paper's (e1, 0) for N <= 2.

    For d = 1 the collision-free domain is not path connected (orderings
    cannot swap; for N = 1 with an interaction part the half-lines cannot be
    crossed), so the target is relabeled to the reachable sector and the
    adaptation is recorded.
    """
    n, d = model.n, model.d
    target = np.zeros((n, d))
    target[:, 0] = 1.0 - np.arange(n)
    adapted = False
    if d == 1:
        if n == 1 and model.singular.active and q0[0, 0] < 0:
            target = -target
            adapted = True
        elif n >= 2:
            order = np.argsort(-q0[:, 0], kind="stable")
            relabeled = np.zeros_like(target)
            relabeled[order, 0] = target[:, 0]
            adapted = not np.array_equal(relabeled, target)
            target = relabeled
    return target, adapted


class _ControlCurve:
    """Closed-form glued path q(s) with analytic first and second derivatives.

    Five segments: momentum bleed phi2 on [0, rho]; blend to the routing path
    phi1 on [rho, 2 rho]; phi1 on [2 rho, T - 2 rho]; blend to the target on
    [T - 2 rho, T - rho]; constant at the target.  The bleed polynomial is
    g(s) = rho/4 - (s - rho)^4 / (4 rho^3): g(0)=0, g'(0)=1, |g'| <= 1, and
    g is C^2-flat at rho, which is all the construction needs while keeping
    third derivatives small enough for the residual check.
    """

    def __init__(self, q0, v0, target, bump, rho, T):
        self.q0 = q0
        self.v0 = v0
        self.target = target
        self.delta = target - q0
        self.bump = bump
        self.rho = rho
        self.T = T

    # -- primitives ---------------------------------------------------------

    def _g(self, s):
        rho = self.rho
        sc = np.minimum(s, rho)
        g = rho / 4.0 - (sc - rho) ** 4 / (4.0 * rho ** 3)
        g1 = np.where(s <= rho, -((sc - rho) ** 3) / rho ** 3, 0.0)
        g2 = np.where(s <= rho, -3.0 * (sc - rho) ** 2 / rho ** 3, 0.0)
        return g, g1, g2

    def _theta(self, t):
        val = 1.0 - _smoothstep7(t - 1.0)
        d1 = -_smoothstep7_d1(t - 1.0)
        d2 = -_smoothstep7_d2(t - 1.0)
        return val, d1, d2

    def _phi2(self, s):
        g, g1, g2 = self._g(s)
        shape = (-1,) + (1,) * self.q0.ndim
        g, g1, g2 = g.reshape(shape), g1.reshape(shape), g2.reshape(shape)
        return self.q0 + g * self.v0, g1 * self.v0, g2 * self.v0

    def _phi1(self, s):
        u = s / self.T
        sig = smoothstep5(u)
        sig1 = smoothstep5_d1(u) / self.T
        sig2 = smoothstep5_d2(u) / self.T ** 2
        shape = (-1,) + (1,) * self.q0.ndim
        sig_, sig1_, sig2_ = sig.reshape(shape), sig1.reshape(shape), sig2.reshape(shape)
        sin_, cos_ = np.sin(math.pi * sig_), np.cos(math.pi * sig_)
        val = self.q0 + self.delta * sig_ + self.bump * sin_
        head = self.delta + self.bump * math.pi * cos_
        d1 = head * sig1_
        d2 = head * sig2_ - self.bump * math.pi ** 2 * sin_ * sig1_ ** 2
        return val, d1, d2

    # -- glued path ----------------------------------------------------------

    def eval(self, s):
        """q, q', q'' at the grid s (vectorized, shape (m, N, d))."""
        s = np.asarray(s, dtype=float)
        rho, T = self.rho, self.T
        q2, d2_, dd2 = self._phi2(np.minimum(s, 2.0 * rho))
        q1, d1_, dd1 = self._phi1(s)
        shape = (-1,) + (1,) * self.q0.ndim

        out = np.empty((len(s),) + self.q0.shape)
        dout = np.empty_like(out)
        ddout = np.empty_like(out)

        m1 = s <= rho
        m2 = (s > rho) & (s <= 2.0 * rho)
        m3 = (s > 2.0 * rho) & (s <= T - 2.0 * rho)
        m4 = (s > T - 2.0 * rho) & (s <= T - rho)
        m5 = s > T - rho

        out[m1], dout[m1], ddout[m1] = q2[m1], d2_[m1], dd2[m1]

        th, th1, th2 = self._theta(s / rho)
        th, th1, th2 = th.reshape(shape), th1.reshape(shape), th2.reshape(shape)
        blend = th * q2 + (1.0 - th) * q1
        dblend = (th1 / rho) * (q2 - q1) + th * d2_ + (1.0 - th) * d1_
        ddblend = (th2 / rho ** 2) * (q2 - q1) + 2.0 * (th1 / rho) * (d2_ - d1_) \
            + th * dd2 + (1.0 - th) * dd1
        out[m2], dout[m2], ddout[m2] = blend[m2], dblend[m2], ddblend[m2]

        out[m3], dout[m3], ddout[m3] = q1[m3], d1_[m3], dd1[m3]

        tau = (T - s) / rho
        tv, tv1, tv2 = self._theta(tau)
        tv, tv1, tv2 = tv.reshape(shape), tv1.reshape(shape), tv2.reshape(shape)
        tail = (1.0 - tv) * q1 + tv * self.target
        dtail = (tv1 / rho) * (q1 - self.target) + (1.0 - tv) * d1_
        ddtail = -(tv2 / rho ** 2) * (q1 - self.target) + 2.0 * (tv1 / rho) * d1_ + (1.0 - tv) * dd1
        out[m4], dout[m4], ddout[m4] = tail[m4], dtail[m4], ddtail[m4]

        out[m5] = self.target
        dout[m5] = 0.0
        ddout[m5] = 0.0
        return out, dout, ddout


def _control_grid(rho, T, dense=20000, mid=8000, tail=4000):
    """Piecewise-uniform grid: dense on the fast bleed/blend pieces, coarse
    on the slow routing leg; returns (grid, segment index ranges)."""
    head = np.linspace(0.0, 2.0 * rho, dense)
    middle = np.linspace(2.0 * rho, T - 2.0 * rho, mid)[1:-1]
    end = np.linspace(T - 2.0 * rho, T, tail)
    grid = np.concatenate([head, middle, end])
    segments = [(0, dense), (dense, dense + mid - 2), (dense + mid - 2, len(grid))]
    return grid, segments


def _gauss_legendre_cumulative(fn, s):
    """Cumulative integral of fn over the grid s by 3-point Gauss-Legendre."""
    nodes = np.array([-math.sqrt(3.0 / 5.0), 0.0, math.sqrt(3.0 / 5.0)])
    weights = np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
    a, b = s[:-1], s[1:]
    half = 0.5 * (b - a)
    midp = 0.5 * (a + b)
    total = None
    for w, xn in zip(weights, nodes):
        vals = fn(midp + half * xn)
        contrib = w * vals * half.reshape((-1,) + (1,) * (vals.ndim - 1))
        total = contrib if total is None else total + contrib
    out = np.zeros((len(s),) + total.shape[1:])
    np.cumsum(total, axis=0, out=out[1:])
    return out


def control_path(model: ModelSpec, x0: State, rho: float = 0.05, seed: int = 0) -> ControlPath:
    """Explicit solution of the control problem: drive x0 to the target with
    zero final momentum, bounded speed, and controls recovered from the ODE.

    rho is shrunk automatically (with a census entry) until the glued path
    stays in the collision-free domain; the routing leg phi1 keeps speed
    <= 1/100, so the momentum map p = q'/sqrt(1 - eps |q'|^2) is well defined
    for every eps in (0, 1].
    """
    eps = model.epsilon
    n, d = model.n, model.d
    q0 = x0.q.copy()
    v0 = relativistic_velocity(x0.p, eps)
    target, adapted = _control_target(model, q0)
    rng = substream(seed, _CTRL_KEY)

    # routing leg: straight homotopy plus orthogonal bumps when it collides;
    # generous clearance keeps the interaction force mild along the slow leg
    bump = np.zeros_like(q0)
    start_clear = float(min_pair_distance(model, q0)) if model.singular.active else math.inf
    clearance_needed = min(0.2, 0.5 * start_clear)
    if model.singular.active:
        u_probe = np.linspace(0.0, 1.0, 513)
        sig = smoothstep5(u_probe).reshape(-1, 1, 1)
        sin_ = np.sin(math.pi * sig)
        for attempt in range(16):
            path = q0 + (target - q0) * sig + bump * sin_
            clear = float(np.min(min_pair_distance(model, path)))
            if clear > clearance_needed:
                break
            if d == 1:
                raise ExperimentFailure(
                    "control path: 1-d routing collided despite sector adaptation",
                    census={"clearance": clear})
            direction = rng.standard_normal((n, d))
            direction[:, 0] = 0.0  # push off the routing axis
            norm = np.linalg.norm(direction, axis=-1, keepdims=True)
            direction = direction / np.maximum(norm, 1e-12)
            bump = bump + 0.35 * (attempt + 1) * direction
        else:
            raise ExperimentFailure("control path: collision-free routing not found",
                                    census={"clearance": clear})

    lengths = np.linalg.norm(target - q0, axis=-1) + math.pi * np.linalg.norm(bump, axis=-1)
    T_route = 190.0 * float(np.max(lengths)) if np.max(lengths) > 0 else 1.0
    shrink = 0
    rho_eff = float(rho)
    while True:
        T = max(1.0, T_route, 8.0 * rho_eff)
        curve = _ControlCurve(q0, v0, target, bump, rho_eff, T)
        s_probe = np.sort(np.concatenate([
            np.linspace(0.0, min(2.0 * rho_eff, T), 2049),
            np.linspace(0.0, T, 2049),
        ]))
        qs, dqs, _ = curve.eval(s_probe)
        clear = float(np.min(min_pair_distance(model, qs))) if model.singular.active else np.inf
        speed = float(np.max(np.linalg.norm(dqs, axis=-1)))
        if (clear > max(model.delta_floor * 1e2, 1e-3)) and (math.sqrt(eps) * speed < 1.0):
            break
        shrink += 1
        rho_eff *= 0.5
        if shrink > 12 or rho_eff < 1e-4:
            raise ExperimentFailure(
                "control path: could not keep the glued path in the domain",
                census={"clearance": clear, "speed": speed, "rho": rho_eff})

    grid, segments = _control_grid(rho_eff, T)

    def p_of(s):
        _, dq, _ = curve.eval(np.atleast_1d(s))
        gam = 1.0 / np.sqrt(1.0 - eps * np.sum(dq * dq, axis=-1, keepdims=True))
        return dq * gam

    def u_of(s):
        s = np.atleast_1d(s)
        qv, dq, ddq = curve.eval(s)
        v2 = np.sum(dq * dq, axis=-1, keepdims=True)
        gam = 1.0 / np.sqrt(1.0 - eps * v2)
        inner = np.sum(dq * ddq, axis=-1, keepdims=True)
        dp = ddq * gam + dq * (eps * inner * gam ** 3)
        # v(p(s)) = q'(s) exactly, so the position equation holds identically
        return (dp + dq - total_forces(model, qv)) / _SQRT2

    qs, dqs, _ = curve.eval(grid)
    ps = p_of(grid)
    us = u_of(grid)
    Us = _gauss_legendre_cumulative(u_of, grid)

    speed = float(np.max(np.linalg.norm(dqs, axis=-1)))
    diagnostics = {
        "endpoint_error_q": float(np.linalg.norm(qs[-1] - target)),
        "endpoint_error_p": float(np.linalg.norm(ps[-1])),
        "speed_sup": speed,
        "speed_margin": float(1.0 - math.sqrt(eps) * speed),
        "clearance": float(np.min(min_pair_distance(model, qs))) if model.singular.active else math.inf,
        "T_route": T_route,
    }
    return ControlPath(times=grid, q=qs, p=ps, controls=Us, control_rate=us,
                       rho=rho_eff, epsilon=eps, T=T, target=target,
                       target_adapted=adapted, shrink_count=shrink,
                       diagnostics=diagnostics, segments=segments)


def _nonuniform_derivative(s, f):
    """Three-point first derivative on a nonuniform grid (interior nodes)."""
    h1 = (s[1:-1] - s[:-2]).reshape((-1,) + (1,) * (f.ndim - 1))
    h2 = (s[2:] - s[1:-1]).reshape((-1,) + (1,) * (f.ndim - 1))
    num = h1 ** 2 * f[2:] - h2 ** 2 * f[:-2] + (h2 ** 2 - h1 ** 2) * f[1:-1]
    return num / (h1 * h2 * (h1 + h2))


def _five_point_derivative(f, h):
    """O(h^4) central first derivative on a uniform grid (interior nodes)."""
    return (f[:-4] - 8.0 * f[1:-3] + 8.0 * f[3:-1] - f[4:]) / (12.0 * h)


def control_residual(model: ModelSpec, path: ControlPath) -> dict:
    """Substitute (q, p, U) into the controlled system, differentiating the
    stored arrays numerically; returns sup-norm residuals of both equations.

    Differentiation is 5-point central per uniform segment (the slow routing
    leg is coarse, so O(h^2) stencils would dominate the residual there).
    """
    s = path.times
    eps = path.epsilon
    res_q_max = 0.0
    res_p_max = 0.0
    segments = path.segments or [(0, len(s))]
    for lo, hi in segments:
        if hi - lo < 5:
            continue
        ss = s[lo:hi]
        h = float(ss[1] - ss[0])
        sel = slice(lo + 2, hi - 2)
        dq_num = _five_point_derivative(path.q[lo:hi], h)
        dp_num = _five_point_derivative(path.p[lo:hi], h)
        du_num = _five_point_derivative(path.controls[lo:hi], h)
        v = relativistic_velocity(path.p[sel], eps)
        res_q = dq_num - v
        forces = total_forces(model, path.q[sel])
        res_p = dp_num + v - forces - _SQRT2 * du_num
        res_q_max = max(res_q_max, float(np.max(np.abs(res_q))))
        res_p_max = max(res_p_max, float(np.max(np.abs(res_p))))
    return {
        "residual_q": res_q_max,
        "residual_p": res_p_max,
        "residual_sup": max(res_q_max, res_p_max),
    }


# ---------------------------------------------------------------------------
# appendix inequalities
# ---------------------------------------------------------------------------

def _collision_free_configs(n, d, count, rng, base_scale=1.0):
    scale = 10.0 ** rng.uniform(-1.5, 1.5, size=(count, 1, 1))
    q = base_scale * scale * rng.standard_normal((count, n, d))
    for _ in range(16):
        diff = q[:, :, None, :] - q[:, None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        idx = np.arange(n)
        dist[:, idx, idx] = np.inf
        bad = dist.min(axis=(1, 2)) < 1e-9
        if not np.any(bad):
            break
        q[bad] = base_scale * rng.standard_normal((int(bad.sum()), n, d))
    return q


def lemma_a1_check(N: int, d: int, gamma: float, s: float, n_trials: int,
                   seed: int = 0) -> dict:
    """Census for the pairwise cross-sum inequality

        sum_i < sum_{j!=i} r_ij/|r_ij|^gamma , sum_{k!=i} r_ik/|r_ik|^(s+1) >
            >= 2 sum_{i<j} |r_ij|^-(s+gamma-1),

    over random collision-free configurations (gamma in (0,1], s >= 0).
    Violations below -1e-9 relative are counted, never raised.
    """
    if not (0.0 < gamma <= 1.0):
        raise ParameterError("lemma A.1: need gamma in (0, 1]")
    if s < 0.0:
        raise ParameterError("lemma A.1: need s >= 0")
    rng = substream(seed, _A1_KEY)
    q = _collision_free_configs(N, d, n_trials, rng)
    if N >= 3:
        # targeted obtuse collinear triples (the proof's hard case)
        m = min(n_trials // 10 + 1, n_trials)
        extra = _collision_free_configs(N, d, m, rng)
        line = rng.uniform(0.5, 2.0, size=(m, 1))
        extra[:, 0, :] = 0.0
        extra[:, 1, :] = 0.0
        extra[:, 1, 0] = line[:, 0]
        extra[:, 2, :] = 0.0
        extra[:, 2, 0] = line[:, 0] + rng.uniform(0.1, 1.0, size=m)
        q[:m] = extra

    diff = q[:, :, None, :] - q[:, None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    idx = np.arange(N)
    dist[:, idx, idx] = 1.0
    mask = ~np.eye(N, dtype=bool)
    a = diff / dist[..., None] ** gamma * mask[None, :, :, None]
    b = diff / dist[..., None] ** (s + 1.0) * mask[None, :, :, None]
    lhs = np.sum(np.sum(a, axis=2) * np.sum(b, axis=2), axis=(1, 2))
    rhs = np.sum(np.where(mask[None], dist ** (-(s + gamma - 1.0)), 0.0), axis=(1, 2))  # ordered pairs = 2 * i<j
    scale = np.maximum(np.maximum(np.abs(lhs), np.abs(rhs)), 1.0)
    margin = (lhs - rhs) / scale
    violations = int(np.sum(margin < -1e-9))
    return {
        "N": N, "d": d, "gamma": gamma, "s": s, "n_trials": int(q.shape[0]),
        "violations": violations,
        "worst_margin": float(margin.min()),
        "max_rel_equality_gap": float(np.max(np.abs(lhs - rhs) / scale)) if N == 2 else None,
        "seed": seed,
    }


def lemma_a2_fit(model: ModelSpec, n_trials: int, seed: int = 0) -> dict:
    """Fit (c_G, C_G) with

        C_G [sum U + sum G] >= sum|q_i| - c_G sum log r_ij
                            >= c_G sum|q_i| + c_G max(-log r_ij)

    over samples including near-collision shells; zero-violation certificate
    for the fitted pair or a fit-failed census.
    """
    if not model.singular.active:
        raise ParameterError("lemma A.2 needs an interaction potential")
    if model.n < 2:
        raise ParameterError("lemma A.2 concerns pair separations; need N >= 2")
    rng = substream(seed, _A2_KEY)
    n, d = model.n, model.d
    q = _collision_free_configs(n, d, n_trials, rng, base_scale=2.0)
    m = n_trials // 4
    if m:
        near = _collision_free_configs(n, d, m, rng, base_scale=1.0)
        rr = 10.0 ** rng.uniform(-6, -1, size=m)
        direction = rng.standard_normal((m, d))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        near[:, 1, :] = near[:, 0, :] + rr[:, None] * direction
        q[:m] = near

    A = potential_energy(model, q)
    diff = q[:, :, None, :] - q[:, None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu, ju = np.triu_indices(n, k=1)
    r_pairs = dist[:, iu, ju]
    radial = np.sum(np.linalg.norm(q, axis=-1), axis=-1)
    sum_log = np.sum(np.log(r_pairs), axis=-1)
    max_neg_log = np.max(-np.log(r_pairs), axis=-1)

    feasible_c = None
    for c in (1.0, 0.5, 0.25, 0.1, 0.05, 0.02, 0.01, 0.005, 0.001):
        mid = radial - c * sum_log
        rhs = c * radial + c * max_neg_log
        if np.all(mid >= rhs - 1e-12 * np.maximum(np.abs(mid), 1.0)):
            feasible_c = c
            break
    if feasible_c is None or np.any(A <= 0):
        return {"feasible": False, "n_trials": n_trials, "seed": seed,
                "census": {"reason": "no feasible c_G or nonpositive total potential",
                           "min_total_potential": float(A.min())}}
    mid = radial - feasible_c * sum_log
    C = float(np.max(mid / A)) * (1.0 + 1e-9)
    C = max(C, 1.0)
    upper_viol = int(np.sum(C * A < mid))
    lower_viol = int(np.sum(mid < feasible_c * radial + feasible_c * max_neg_log
                            - 1e-12 * np.maximum(np.abs(mid), 1.0)))
    return {
        "feasible": True,
        "c_G": feasible_c,
        "C_G": C,
        "violations": upper_viol + lower_viol,
        "n_trials": int(q.shape[0]),
        "worst_upper_slack": float(np.min(C * A - mid)),
        "worst_lower_slack": float(np.min(mid - feasible_c * radial - feasible_c * max_neg_log)),
        "seed": seed,
    }
