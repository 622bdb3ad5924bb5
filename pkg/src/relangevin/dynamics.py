"""Drift fields, generator, Hamiltonians, and the unnormalized stationary
density for the relativistic system and its classical limit.

All functions are pure and accept batched configurations ``(..., N, d)``.
The interaction term follows the package pair convention (unordered pairs);
for ``N == 1`` the interaction potential acts at the origin, matching the
single-particle reduction of the dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InvalidStateError, ParameterError, SingularityError
from .model import (
    ModelSpec,
    State,
    confining_grad,
    confining_value,
    relativistic_velocity,
    singular_grad,
    singular_value,
)

__all__ = [
    "DriftKind",
    "Observable",
    "drift",
    "drift_arrays",
    "hamiltonian",
    "potential_energy",
    "generator_apply",
    "log_stationary_density",
    "min_pair_distance",
    "total_forces",
    "interaction_forces",
    "confining_forces",
    "in_domain",
    "smoothstep5",
]


# ---------------------------------------------------------------------------
# smooth cutoff primitive (shared with the truncated systems)
# ---------------------------------------------------------------------------

def smoothstep5(u):
    """Quintic smoothstep on [0, 1]: C^2, monotone, slope <= 15/8."""
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (10.0 + u * (-15.0 + 6.0 * u))


def smoothstep5_d1(u):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 30.0 * u ** 2 * (1.0 - u) ** 2, 0.0)


def smoothstep5_d2(u):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u), 0.0)


@dataclass(frozen=True)
class DriftKind:
    """Drift selector: relativistic or langevin, optionally truncated.

    ``cutoff`` is a :class:`relangevin.limits.CutoffSpec`; when present the
    confining force is damped by ``theta_R(|q_i|)`` and each interaction term
    by ``theta_R(1/r)``.
    """

    tag: str = "relativistic"
    cutoff: Optional[object] = None

    def __post_init__(self):
        if self.tag not in ("relativistic", "langevin"):
            raise ParameterError(f"drift kind: unknown tag {self.tag!r}")

    @property
    def truncated(self) -> bool:
        return self.cutoff is not None

    def label(self) -> str:
        return self.tag + ("-truncated" if self.truncated else "")


# ---------------------------------------------------------------------------
# pair geometry
# ---------------------------------------------------------------------------

def _pair_tensors(q):
    """Displacements r_ij = q_i - q_j as (..., N, N, d) plus distances."""
    diff = q[..., :, None, :] - q[..., None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    n = q.shape[-2]
    idx = np.arange(n)
    dist[..., idx, idx] = np.inf
    return diff, dist


def min_pair_distance(model: ModelSpec, q):
    """Distance to the collision set; +inf when no interaction is active."""
    q = np.asarray(q, dtype=float)
    if not model.singular.active:
        return np.full(q.shape[:-2], np.inf)
    if model.n == 1:
        return np.linalg.norm(q[..., 0, :], axis=-1)
    _, dist = _pair_tensors(q)
    return np.min(dist, axis=(-2, -1))


def in_domain(model: ModelSpec, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    finite = np.all(np.isfinite(q), axis=(-2, -1))
    return finite & (min_pair_distance(model, q) > model.delta_floor)


def _closest_pair(model: ModelSpec, q):
    if model.n == 1:
        return (0, -1), float(np.linalg.norm(q[0]))
    _, dist = _pair_tensors(q)
    flat = int(np.argmin(dist))
    i, j = divmod(flat, model.n)
    return (min(i, j), max(i, j)), float(dist[i, j])


def _require_in_domain(model: ModelSpec, q):
    if not np.all(np.isfinite(q)):
        raise InvalidStateError("state contains non-finite coordinates")
    if not model.singular.active:
        return
    dmin = min_pair_distance(model, q)
    if np.any(dmin <= model.delta_floor):
        qq = q if q.ndim == 2 else q[tuple(np.unravel_index(int(np.argmin(dmin)), dmin.shape))]
        pair, dval = _closest_pair(model, qq)
        raise SingularityError(
            f"configuration at the collision floor: pair {pair} at distance {dval:.3e}",
            pair=pair, distance=dval,
        )


# ---------------------------------------------------------------------------
# forces
# ---------------------------------------------------------------------------

def confining_forces(model: ModelSpec, q, cutoff=None):
    """-theta_R(|q_i|) grad U(q_i) per particle (theta = 1 untruncated)."""
    grad = confining_grad(model.confining, q)
    if cutoff is not None:
        rad = np.linalg.norm(q, axis=-1, keepdims=True)
        grad = grad * cutoff.profile(rad)
    return -grad


def interaction_forces(model: ModelSpec, q, cutoff=None):
    """-sum_{j != i} theta_R(1/r_ij) grad G(q_i - q_j) per particle.

    For N == 1 this is the force from the fixed singularity at the origin.
    """
    q = np.asarray(q, dtype=float)
    if not model.singular.active:
        return np.zeros_like(q)
    if model.n == 1:
        g = singular_grad(model.singular, q[..., 0, :])
        if cutoff is not None:
            rad = np.linalg.norm(q[..., 0, :], axis=-1, keepdims=True)
            g = g * cutoff.profile(1.0 / rad)
        return -g[..., None, :]
    diff, dist = _pair_tensors(q)
    n = model.n
    idx = np.arange(n)
    safe = diff.copy()
    safe[..., idx, idx, :] = 1.0  # dummy off the singularity; masked below
    g = singular_grad(model.singular, safe)
    g[..., idx, idx, :] = 0.0
    if cutoff is not None:
        with np.errstate(divide="ignore"):
            fac = cutoff.profile(1.0 / dist)  # dist has +inf diagonal -> theta(0)=1, masked anyway
        g = g * fac[..., None]
    return -np.sum(g, axis=-2)


def total_forces(model: ModelSpec, q, cutoff=None):
    return confining_forces(model, q, cutoff) + interaction_forces(model, q, cutoff)


def drift_arrays(kind: DriftKind, model: ModelSpec, q, p):
    """Raw drift (dq, dp); no domain checks (callers guard)."""
    if kind.tag == "relativistic":
        vel = relativistic_velocity(p, model.epsilon)
    else:
        vel = np.asarray(p, dtype=float)
    dp = -vel + total_forces(model, q, kind.cutoff)
    return vel, dp


def drift(kind: DriftKind, model: ModelSpec, x: State):
    """Drift field at a validated phase point."""
    _require_in_domain(model, x.q)
    return drift_arrays(kind, model, x.q, x.p)


# ---------------------------------------------------------------------------
# energies and the stationary density
# ---------------------------------------------------------------------------

def potential_energy(model: ModelSpec, q):
    """sum_i U(q_i) + sum_{i<j} G(q_i - q_j), with the energy shift folded in.

    For N == 1 the interaction term is G(q).
    """
    q = np.asarray(q, dtype=float)
    u = np.sum(confining_value(model.confining, q), axis=-1) + model.n * model.energy_shift
    if not model.singular.active:
        return u
    if model.n == 1:
        return u + singular_value(model.singular, q[..., 0, :])
    diff, _ = _pair_tensors(q)
    n = model.n
    iu, ju = np.triu_indices(n, k=1)
    g = singular_value(model.singular, diff[..., iu, ju, :])
    return u + np.sum(g, axis=-1)


def hamiltonian(model: ModelSpec, x, p=None):
    """eps * (total potential) + sum_i sqrt(1 + eps |p_i|^2); always >= N."""
    if p is None:
        q, p = x.q, x.p
    else:
        q = np.asarray(x, dtype=float)
    _require_in_domain(model, q)
    eps = model.epsilon
    kin = np.sum(np.sqrt(1.0 + eps * np.sum(p * p, axis=-1)), axis=-1)
    return eps * potential_energy(model, q) + kin


def log_stationary_density(model: ModelSpec, x, p=None):
    """Unnormalized log density of the relativistic Maxwellian.

    -(sum_i (1/eps) sqrt(1 + eps |p_i|^2) + total potential); the
    normalization constant is never computed.
    """
    if p is None:
        q, p = x.q, x.p
    else:
        q = np.asarray(x, dtype=float)
    _require_in_domain(model, q)
    eps = model.epsilon
    kin = np.sum(np.sqrt(1.0 + eps * np.sum(p * p, axis=-1)), axis=-1) / eps
    return -(kin + potential_energy(model, q))


# ---------------------------------------------------------------------------
# observables and the generator
# ---------------------------------------------------------------------------

@dataclass
class Observable:
    """A C^2 test function phi(q, p) with optional analytic derivatives.

    Missing derivatives fall back to nested central differences with step
    ``1e-5 * (1 + |x|)``; the Lyapunov scanner and the stationarity checks
    need both the fast analytic route and this derivative-free fallback.
    """

    f: Callable
    grad_q: Optional[Callable] = None
    grad_p: Optional[Callable] = None
    lap_p: Optional[Callable] = None
    name: str = ""

    def value(self, q, p):
        return np.asarray(self.f(q, p), dtype=float)

    def _step(self, q, p):
        norm = np.sqrt(np.sum(q * q, axis=(-2, -1)) + np.sum(p * p, axis=(-2, -1)))
        return 1e-5 * (1.0 + norm)

    def _step2(self, q, p):
        # second differences are rounding-dominated at the first-difference
        # step; 5e-4 (1+|x|) balances truncation against cancellation in
        # double precision for O(1)..O(1e3)-sized test functions
        norm = np.sqrt(np.sum(q * q, axis=(-2, -1)) + np.sum(p * p, axis=(-2, -1)))
        return 5e-4 * (1.0 + norm)

    def gq(self, q, p):
        if self.grad_q is not None:
            return np.asarray(self.grad_q(q, p), dtype=float)
        return _fd_grad(self.f, q, p, wrt="q", h=self._step(q, p))

    def gp(self, q, p):
        if self.grad_p is not None:
            return np.asarray(self.grad_p(q, p), dtype=float)
        return _fd_grad(self.f, q, p, wrt="p", h=self._step(q, p))

    def lp(self, q, p):
        if self.lap_p is not None:
            return np.asarray(self.lap_p(q, p), dtype=float)
        return _fd_laplacian(self.f, q, p, h=self._step2(q, p))


def _fd_grad(f, q, p, wrt, h):
    base = q if wrt == "q" else p
    h = np.asarray(h)[..., None, None]
    out = np.zeros_like(base)
    n, d = base.shape[-2:]
    for i in range(n):
        for k in range(d):
            e = np.zeros_like(base)
            e[..., i, k] = 1.0
            hi = h[..., 0, 0]
            plus = (q + h * e, p) if wrt == "q" else (q, p + h * e)
            minus = (q - h * e, p) if wrt == "q" else (q, p - h * e)
            out[..., i, k] = (np.asarray(f(*plus)) - np.asarray(f(*minus))) / (2.0 * hi)
    return out


def _fd_laplacian(f, q, p, h):
    h = np.asarray(h)[..., None, None]
    n, d = p.shape[-2:]
    f0 = np.asarray(f(q, p), dtype=float)
    out = np.zeros_like(f0)
    for i in range(n):
        for k in range(d):
            e = np.zeros_like(p)
            e[..., i, k] = 1.0
            hi = np.asarray(h)[..., 0, 0]
            out = out + (np.asarray(f(q, p + h * e)) + np.asarray(f(q, p - h * e)) - 2.0 * f0) / hi ** 2
    return out


def generator_apply(model: ModelSpec, phi: Observable, x, p=None):
    """Generator of the relativistic system applied to phi at x.

    L phi = sum_i v(p_i).grad_qi phi
          + sum_i (-v(p_i) - grad U(q_i) - sum_{j!=i} grad G(q_i-q_j)).grad_pi phi
          + sum_i lap_pi phi
    """
    if p is None:
        q, p = x.q, x.p
    else:
        q = np.asarray(x, dtype=float)
    _require_in_domain(model, q)
    dq, dp = drift_arrays(DriftKind("relativistic"), model, q, p)
    gq = phi.gq(q, p)
    gp = phi.gp(q, p)
    out = np.sum(dq * gq, axis=(-2, -1)) + np.sum(dp * gp, axis=(-2, -1)) + phi.lp(q, p)
    if not np.all(np.isfinite(out)):
        raise InvalidStateError("generator_apply produced non-finite derivative")
    return out
