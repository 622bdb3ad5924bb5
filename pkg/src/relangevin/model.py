"""Potential families, model parameters, and numerical checks of the
structural assumptions on the confining and interaction potentials.

Conventions used throughout the package:

* a single-particle quantity takes arrays of shape ``(..., d)`` and returns
  the batch shape ``(...)`` (values) or ``(..., d)`` (gradients);
* a configuration is an array of shape ``(..., N, d)``;
* ``epsilon`` is the inverse squared speed of light, ``epsilon in (0, 1]``.

Pair sums are always over unordered pairs ``i < j``; formulas stated with
ordered pairs are absorbed into the interaction coefficient.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidStateError, ParameterError, SingularityError
from .rng import substream

__all__ = [
    "ConfiningSpec",
    "SingularSpec",
    "ModelSpec",
    "State",
    "relativistic_velocity",
    "kinetic_energy",
    "confining_value",
    "confining_grad",
    "singular_value",
    "singular_grad",
    "validate_assumptions",
    "ValidationReport",
    "default_state",
]

_VALIDATE_KEY = 93  # rng namespace for assumption probing


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass
class ConfiningSpec:
    """Smooth confining potential, default family ``U(q) = 1 + |q|**(lam+1)``.

    ``lam >= 1`` is the growth exponent.  The constants ``a1, a2, a3`` of the
    growth and coercivity bounds may be declared; otherwise they are estimated
    by probing in :func:`validate_assumptions`.  A user-supplied family passes
    callables ``value_fn(q) -> (...)`` and ``grad_fn(q) -> (..., d)``.
    """

    family: str = "poly"
    lam: float = 1.0
    a1: Optional[float] = None
    a2: Optional[float] = None
    a3: Optional[float] = None
    value_fn: Optional[Callable] = None
    grad_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.family not in ("poly", "callable"):
            raise ParameterError(f"confining.family: unknown family {self.family!r}")
        if self.lam < 1.0:
            raise ParameterError(f"confining.lambda: need lambda >= 1, got {self.lam}")
        if self.family == "callable" and (self.value_fn is None or self.grad_fn is None):
            raise ParameterError("confining.family=callable requires value_fn and grad_fn")

    def to_dict(self):
        return {"family": self.family, "lambda": self.lam}


@dataclass
class SingularSpec:
    """Even repulsive pair potential, singular at the origin.

    Families:

    * ``riesz``:  ``G(r) = a4 / ((beta1-1) |r|**(beta1-1))`` for ``beta1 > 1``
    * ``coulomb``: riesz with ``beta1 = 2``, i.e. ``G(r) = a4/|r|``
    * ``log``:  ``G(r) = -a4 log|r|`` (``beta1 = 1``)
    * ``lennard-jones``: ``4 eps_lj ((sigma/r)**12 - (sigma/r)**6)``
    * ``none``: no interaction part
    * ``callable``: user-supplied ``value_fn``/``grad_fn`` with declared
      exponents and structural constants

    The structural bound constants ``(a4, a5, a6)`` are exact for the built-in
    families: riesz/coulomb/log have ``a5 = a6 = 0`` and lennard-jones has
    ``a4 = 48 eps_lj sigma**12``, ``a5 = -24 eps_lj sigma**6``, ``a6 = 0``.
    """

    family: str = "coulomb"
    beta1: float = 2.0
    beta2: float = 0.0
    a4: float = 1.0
    a5: float = 0.0
    a6: float = 0.0
    sigma: float = 1.0
    eps_lj: float = 1.0
    value_fn: Optional[Callable] = None
    grad_fn: Optional[Callable] = None

    def __post_init__(self):
        known = ("riesz", "coulomb", "log", "lennard-jones", "none", "callable")
        if self.family not in known:
            raise ParameterError(f"singular.family: unknown family {self.family!r}")
        if self.family == "coulomb":
            self.beta1 = 2.0
            self.a5 = 0.0
            self.a6 = 0.0
        elif self.family == "riesz":
            if self.beta1 <= 1.0:
                raise ParameterError("singular.beta1: riesz family needs beta1 > 1")
            self.a5 = 0.0
            self.a6 = 0.0
        elif self.family == "log":
            self.beta1 = 1.0
            self.beta2 = 0.0
            self.a5 = 0.0
            self.a6 = 0.0
        elif self.family == "lennard-jones":
            if self.sigma <= 0 or self.eps_lj <= 0:
                raise ParameterError("singular: lennard-jones needs sigma > 0, eps_lj > 0")
            self.beta1 = 13.0
            self.beta2 = 7.0
            self.a4 = 48.0 * self.eps_lj * self.sigma ** 12
            self.a5 = -24.0 * self.eps_lj * self.sigma ** 6
            self.a6 = 0.0
        elif self.family == "callable":
            if self.value_fn is None or self.grad_fn is None:
                raise ParameterError("singular.family=callable requires value_fn and grad_fn")
        if self.family != "none":
            if self.beta1 < 1.0:
                raise ParameterError("singular.beta1: need beta1 >= 1")
            if not (0.0 <= self.beta2 < self.beta1):
                raise ParameterError(
                    f"singular.beta2: need 0 <= beta2 < beta1, got beta2={self.beta2}, beta1={self.beta1}"
                )
            if self.a4 <= 0:
                raise ParameterError("singular.a4: need a4 > 0")

    @property
    def active(self) -> bool:
        return self.family != "none"

    @property
    def g2_compliant(self) -> bool:
        """Near-origin growth restriction needed for the N >= 2 drift scans."""
        return self.active and 1.0 < self.beta1 <= 2.0 and self.beta2 < self.beta1 - 1.0

    def to_dict(self):
        out = {"family": self.family}
        if self.active:
            out.update({"beta1": self.beta1, "beta2": self.beta2, "a4": self.a4})
            if self.family == "lennard-jones":
                out.update({"sigma": self.sigma, "eps_lj": self.eps_lj})
        return out


@dataclass
class ModelSpec:
    """Full model: particle count, dimension, epsilon, and the potentials.

    For ``n == 1`` the interaction potential acts as a fixed singular
    potential centered at the origin (the single-particle system of the
    underlying dynamics), so the collision-free domain is ``q != 0``.  For
    ``n >= 2`` it acts pairwise and the domain excludes ``q_i == q_j``.
    Models with ``singular.family == "none"`` have no domain restriction.

    ``energy_shift`` is added to U so the total potential stays >= 1; pass
    ``None`` to have it probed automatically.
    """

    n: int = 1
    d: int = 1
    epsilon: float = 0.01
    confining: ConfiningSpec = field(default_factory=ConfiningSpec)
    singular: SingularSpec = field(default_factory=SingularSpec)
    energy_shift: Optional[float] = None
    delta_floor: float = 1e-10

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ParameterError(f"model: need n >= 1 and d >= 1, got n={self.n}, d={self.d}")
        if not (0.0 < self.epsilon <= 1.0):
            raise ParameterError(f"model.epsilon: need epsilon in (0, 1], got {self.epsilon}")
        if self.delta_floor <= 0:
            raise ParameterError("model.delta_floor: need > 0")
        if self.energy_shift is None:
            self.energy_shift = _auto_energy_shift(self)

    @property
    def n_pairs(self) -> int:
        return self.n * (self.n - 1) // 2

    def with_epsilon(self, epsilon: float) -> "ModelSpec":
        return dataclasses.replace(self, epsilon=float(epsilon))

    def to_dict(self):
        return {
            "n": self.n,
            "d": self.d,
            "epsilon": self.epsilon,
            "confining": self.confining.to_dict(),
            "singular": self.singular.to_dict(),
            "energy_shift": self.energy_shift,
            "delta_floor": self.delta_floor,
        }

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class State:
    """Phase point: positions ``q`` and momenta ``p``, each ``(N, d)``."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if self.q.shape != self.p.shape or self.q.ndim != 2:
            raise InvalidStateError(f"state: q and p must share shape (N, d), got {self.q.shape} vs {self.p.shape}")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.p))):
            raise InvalidStateError("state: non-finite coordinates")

    def copy(self) -> "State":
        return State(self.q.copy(), self.p.copy())


def default_state(model: ModelSpec) -> State:
    """Reproducible collision-free start: lattice positions, zero momenta.

    ``n == 1`` starts at the first unit vector (the origin is the singular
    point when an interaction part is present); ``n >= 2`` sits on a centered
    unit-spacing lattice.
    """
    n, d = model.n, model.d
    if n == 1:
        q = np.zeros((1, d))
        q[0, 0] = 1.0
        return State(q, np.zeros((1, d)))
    side = int(np.ceil(n ** (1.0 / d)))
    pts = []
    if d == 1:
        pts = [[float(i)] for i in range(n)]
    else:
        grid = np.stack(np.meshgrid(*([np.arange(side, dtype=float)] * d), indexing="ij"), axis=-1)
        flat = grid.reshape(-1, d)
        order = np.lexsort(tuple(flat[:, k] for k in reversed(range(d))))
        pts = [flat[i] for i in order[:n]]
    q = np.asarray(pts, dtype=float)
    q -= q.mean(axis=0, keepdims=True)
    return State(q, np.zeros((n, d)))


# ---------------------------------------------------------------------------
# elementary maps
# ---------------------------------------------------------------------------

def relativistic_velocity(p, eps):
    """Bounded velocity map ``p / sqrt(1 + eps |p|^2)``; norm < 1/sqrt(eps)."""
    if eps <= 0:
        raise ParameterError(f"epsilon must be positive, got {eps}")
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise InvalidStateError("relativistic_velocity: non-finite momentum")
    s = np.sqrt(1.0 + eps * np.sum(p * p, axis=-1, keepdims=True))
    return p / s


def kinetic_energy(p, eps):
    """Per-particle kinetic term ``(1/eps) sqrt(1 + eps |p|^2)``.

    Its p-gradient is exactly :func:`relativistic_velocity`.
    """
    if eps <= 0:
        raise ParameterError(f"epsilon must be positive, got {eps}")
    p = np.asarray(p, dtype=float)
    return np.sqrt(1.0 + eps * np.sum(p * p, axis=-1)) / eps


# ---------------------------------------------------------------------------
# confining potential
# ---------------------------------------------------------------------------

def confining_value(spec: ConfiningSpec, q):
    q = np.asarray(q, dtype=float)
    if spec.family == "callable":
        return np.asarray(spec.value_fn(q), dtype=float)
    r2 = np.sum(q * q, axis=-1)
    return 1.0 + r2 ** ((spec.lam + 1.0) / 2.0)


def confining_grad(spec: ConfiningSpec, q):
    q = np.asarray(q, dtype=float)
    if spec.family == "callable":
        return np.asarray(spec.grad_fn(q), dtype=float)
    lam = spec.lam
    r = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    # |q|^(lam-1) with the 0^0 = 1 convention so lam = 1 stays smooth at 0
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(r > 0, r ** (lam - 1.0), 0.0 if lam > 1.0 else 1.0)
    return (lam + 1.0) * fac * q


# ---------------------------------------------------------------------------
# singular interaction potential
# ---------------------------------------------------------------------------

def _check_nonzero(spec, r):
    rn = np.sqrt(np.sum(r * r, axis=-1))
    if np.any(rn == 0.0):
        raise SingularityError("singular potential evaluated at r = 0", distance=0.0)
    if not np.all(np.isfinite(r)):
        raise InvalidStateError("singular potential: non-finite separation")
    return rn


def singular_value(spec: SingularSpec, r):
    r = np.asarray(r, dtype=float)
    if not spec.active:
        return np.zeros(r.shape[:-1])
    rn = _check_nonzero(spec, r)
    if spec.family == "callable":
        return np.asarray(spec.value_fn(r), dtype=float)
    if spec.family == "log":
        return -spec.a4 * np.log(rn)
    if spec.family == "lennard-jones":
        s6 = (spec.sigma / rn) ** 6
        return 4.0 * spec.eps_lj * (s6 * s6 - s6)
    # riesz / coulomb
    return spec.a4 / ((spec.beta1 - 1.0) * rn ** (spec.beta1 - 1.0))


def singular_grad(spec: SingularSpec, r):
    r = np.asarray(r, dtype=float)
    if not spec.active:
        return np.zeros_like(r)
    rn = _check_nonzero(spec, r)[..., None]
    if spec.family == "callable":
        return np.asarray(spec.grad_fn(r), dtype=float)
    if spec.family == "log":
        return -spec.a4 * r / rn ** 2
    if spec.family == "lennard-jones":
        c12 = 48.0 * spec.eps_lj * spec.sigma ** 12
        c6 = 24.0 * spec.eps_lj * spec.sigma ** 6
        return (-c12 / rn ** 14 + c6 / rn ** 8) * r
    return -spec.a4 * r / rn ** (spec.beta1 + 1.0)


def _auto_energy_shift(model: ModelSpec) -> float:
    """Smallest shift of U keeping the sampled total potential >= 1.

    The built-in U already satisfies U >= 1 and riesz/coulomb/log G >= 0 on
    r <= 1 only for log; a radial probe of the most negative reachable pair
    energy bounds how far the total can dip.
    """
    if not model.singular.active or model.n == 0:
        return 0.0
    radii = np.geomspace(1e-3, 1e3, 512)
    g = singular_value(model.singular, radii[:, None] * np.ones((1, 1)))
    g_min = float(np.min(g))
    n_pairs = max(model.n_pairs, 1 if model.n == 1 else 0)
    # U >= 1 per particle: require n*1 + n_pairs*g_min + n*shift >= 1
    deficit = 1.0 - (model.n * 1.0 + n_pairs * min(g_min, 0.0))
    return max(0.0, deficit / model.n)


# ---------------------------------------------------------------------------
# assumption validation
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_residual: float
    constants: dict

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ValidationReport:
    model: dict
    checks: list
    constants: dict
    g2_compliant: bool
    passed: bool
    probe_count: int
    seed: int
    tolerance: float

    def to_dict(self):
        return {
            "model": self.model,
            "checks": [c.to_dict() for c in self.checks],
            "constants": self.constants,
            "g2_compliant": self.g2_compliant,
            "passed": self.passed,
            "probe_count": self.probe_count,
            "seed": self.seed,
            "tolerance": self.tolerance,
            "note": "probing is a sound falsifier, not a proof",
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


def _probe_points(d, probe_count, rng):
    """Radially log-spaced probes in [1e-3, 1e3] with random directions."""
    radii = np.geomspace(1e-3, 1e3, probe_count)
    dirs = rng.standard_normal((probe_count, d))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return radii[:, None] * dirs


def validate_assumptions(model: ModelSpec, probe_count: int = 4096, rng_seed: int = 0,
                         tolerance: float = 1e-9) -> ValidationReport:
    """Probe the growth, coercivity, symmetry and structural bounds.

    Constants that were not declared are estimated from the probes (with a
    relative headroom of ``tolerance``), so a failure means a *declared*
    constant or a structural identity is violated beyond ``tolerance``.
    Raises :class:`ParameterError` on invariant violations before probing and
    fails loudly (raises) if any inequality is violated beyond tolerance.
    """
    if probe_count < 1:
        raise ParameterError("probe_count must be >= 1")
    rng = substream(rng_seed, _VALIDATE_KEY)
    conf, sing = model.confining, model.singular
    qs = _probe_points(model.d, probe_count, rng)
    checks = []

    u = confining_value(conf, qs) + model.energy_shift
    du = confining_grad(conf, qs)
    rn = np.linalg.norm(qs, axis=-1)
    lam = conf.lam

    # (2.2) growth sandwich for U
    a1_low = 0.5 * (-u + np.sqrt(u * u + 4.0 * rn ** (lam + 1.0)))
    a1_up = u / (1.0 + rn ** (lam + 1.0))
    a1_grad = np.linalg.norm(du, axis=-1) / (1.0 + rn ** lam)
    a1_est = float(max(a1_low.max(), a1_up.max(), a1_grad.max()))
    a1 = conf.a1 if conf.a1 is not None else a1_est * (1.0 + tolerance) + tolerance
    res_22 = np.maximum(
        (1.0 / a1) * rn ** (lam + 1.0) - a1 - u,
        u - a1 * (1.0 + rn ** (lam + 1.0)),
    )
    checks.append(_residual_check("(2.2) U growth sandwich", res_22, u, tolerance, {"a1": a1, "lambda": lam}))

    # (2.3) gradient growth
    res_23 = np.linalg.norm(du, axis=-1) - a1 * (1.0 + rn ** lam)
    checks.append(_residual_check("(2.3) grad-U growth", res_23, np.abs(u), tolerance, {"a1": a1}))

    # (2.4) coercivity
    inner = np.sum(du * qs, axis=-1)
    far = rn >= 1.0
    ratio = inner[far] / rn[far] ** (lam + 1.0)
    a2_est = float(max(ratio.min(), 0.0)) * (1.0 - 1e-6)
    a2 = conf.a2 if conf.a2 is not None else max(a2_est, 1e-12)
    a3_need = float(np.max(a2 * rn ** (lam + 1.0) - inner))
    a3 = conf.a3 if conf.a3 is not None else max(a3_need, 0.0) * (1.0 + tolerance) + tolerance
    res_24 = a2 * rn ** (lam + 1.0) - a3 - inner
    checks.append(_residual_check("(2.4) U coercivity", res_24, np.abs(inner) + 1.0, tolerance,
                                  {"a2": a2, "a3": a3}))

    g2 = sing.g2_compliant
    constants = {"a1": a1, "a2": a2, "a3": a3}
    if sing.active:
        rs = _probe_points(model.d, probe_count, rng)
        rnorm = np.linalg.norm(rs, axis=-1)
        g = singular_value(sing, rs)
        dg = singular_grad(sing, rs)
        b1, b2 = sing.beta1, sing.beta2

        # (G1) symmetry: G even, grad G odd
        res_sym = np.maximum(
            np.abs(g - singular_value(sing, -rs)),
            np.linalg.norm(dg + singular_grad(sing, -rs), axis=-1),
        )
        checks.append(_residual_check("(G1) symmetry", res_sym, np.abs(g) + 1.0, tolerance, {}))

        # (2.5)/(2.6) growth of G and grad G, sharing a1 with U
        env_g = 1.0 + rnorm + rnorm ** (-b1)
        env_dg = 1.0 + rnorm ** (-b1)
        a1g = float(max((np.abs(g) / env_g).max(), (np.linalg.norm(dg, axis=-1) / env_dg).max()))
        a1s = max(a1, a1g * (1.0 + tolerance) + tolerance)
        constants["a1"] = a1s
        checks.append(_residual_check("(2.5) G growth", np.abs(g) - a1s * env_g, np.abs(g) + 1.0, tolerance,
                                      {"a1": a1s, "beta1": b1}))
        checks.append(_residual_check("(2.6) grad-G growth", np.linalg.norm(dg, axis=-1) - a1s * env_dg,
                                      np.linalg.norm(dg, axis=-1) + 1.0, tolerance, {"a1": a1s}))

        # (2.7) structural bound and its derived one-term variant (2.8)
        struct = dg + sing.a4 * rs / rnorm[:, None] ** (b1 + 1.0)
        if b2 > 0 or sing.a5 != 0.0:
            struct = struct + sing.a5 * rs / rnorm[:, None] ** (b2 + 1.0)
        res_norm = np.linalg.norm(struct, axis=-1)
        a6_fit = float(res_norm.max())
        a6 = sing.a6 if sing.a6 > 0 else a6_fit
        scale = np.linalg.norm(dg, axis=-1) + 1.0
        checks.append(_residual_check("(2.7) structural bound", res_norm - max(a6, a6_fit), scale,
                                      tolerance, {"a4": sing.a4, "a5": sing.a5, "a6_fitted": a6_fit,
                                                  "beta1": b1, "beta2": b2}))
        one_term = np.linalg.norm(dg + sing.a4 * rs / rnorm[:, None] ** (b1 + 1.0), axis=-1)
        env_28 = abs(sing.a5) * rnorm ** (-b2) + max(a6, a6_fit)
        checks.append(_residual_check("(2.8) one-term structural bound", one_term - env_28, scale,
                                      tolerance, {"a5": sing.a5, "a6": max(a6, a6_fit)}))
        constants.update({"a4": sing.a4, "a5": sing.a5, "a6": max(a6, a6_fit)})

    passed = all(c.passed for c in checks)
    report = ValidationReport(
        model=model.to_dict(), checks=checks, constants=constants,
        g2_compliant=g2, passed=passed, probe_count=probe_count,
        seed=rng_seed, tolerance=tolerance,
    )
    if not passed:
        bad = [c.name for c in checks if not c.passed]
        raise ParameterError(f"assumption checks failed beyond tolerance: {bad}")
    return report


def _residual_check(name, residual, scale, tolerance, constants):
    rel = np.asarray(residual) / np.maximum(np.asarray(scale), 1.0)
    worst = float(np.max(rel))
    return CheckResult(name=name, passed=bool(worst <= tolerance), worst_residual=worst,
                       constants=constants)
