"""Singularity-aware stochastic integrators, shared-noise coupling of the
relativistic system with its classical limit, and deterministic ensembles.

Determinism contract: ``(model, scheme, x0, T, seed)`` fully determines every
output bit.  Trajectory ``k`` of an ensemble draws from the substream
``(seed, namespace, k)`` (see :mod:`relangevin.rng`), so results do not
depend on worker count or scheduling order.  Rejected steps are refined by
halving with a Brownian-bridge split of the increment, which preserves the
driving path under refinement.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import (
    DriftKind,
    drift_arrays,
    hamiltonian,
    min_pair_distance,
    total_forces,
)
from .errors import IntegrationFailure, ParameterError, StepRejected
from .model import ModelSpec, State, relativistic_velocity
from .rng import substream

__all__ = [
    "Scheme",
    "Trajectory",
    "CoupledRun",
    "EnsembleResult",
    "step",
    "adaptive_dt",
    "simulate",
    "simulate_coupled",
    "simulate_ensemble",
    "pilot_dt",
    "parallel_map",
]

_SIM_KEY = 11
_COUPLED_KEY = 12
_ENSEMBLE_KEY = 13

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class Scheme:
    """Integrator selection and the adaptive policy parameters."""

    method: str = "strang-split"
    dt: float = 1e-3
    c_safe: float = 0.1
    max_halvings: int = 40

    def __post_init__(self):
        if self.method not in ("strang-split", "euler-maruyama"):
            raise ParameterError(f"scheme.method: unknown method {self.method!r}")
        if self.dt <= 0:
            raise ParameterError("scheme.dt: need dt > 0")
        if not (0.0 < self.c_safe <= 1.0):
            raise ParameterError("scheme.c_safe: need c_safe in (0, 1]")
        if self.max_halvings < 1:
            raise ParameterError("scheme.max_halvings: need >= 1")

    def to_dict(self):
        return {"method": self.method, "dt": self.dt, "c_safe": self.c_safe,
                "max_halvings": self.max_halvings}


@dataclass
class Trajectory:
    """Recorded path with per-node diagnostics."""

    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    hamiltonian: np.ndarray
    min_dist: np.ndarray
    dt_eff: np.ndarray
    rejections: np.ndarray
    seed: int
    model_hash: str
    scheme: dict
    kind: str
    stream_key: tuple = ()

    def state(self, i: int = -1) -> State:
        return State(self.q[i].copy(), self.p[i].copy())

    def __len__(self):
        return len(self.times)


@dataclass
class CoupledRun:
    """Two legs driven by the same Brownian increments on one grid."""

    relativistic: Trajectory
    langevin: Trajectory
    sup_distance: np.ndarray  # running sup of |dq| + |dp| at the grid nodes
    increment_hash_relativistic: str
    increment_hash_langevin: str
    epsilon: float

    @property
    def coupled(self) -> bool:
        return self.increment_hash_relativistic == self.increment_hash_langevin


@dataclass
class EnsembleResult:
    trajectories: list
    failures: dict = field(default_factory=dict)

    @property
    def n_ok(self):
        return sum(1 for t in self.trajectories if t is not None)


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------

def _velocity(kind: DriftKind, model: ModelSpec, p):
    if kind.tag == "relativistic":
        return relativistic_velocity(p, model.epsilon)
    return p


def _step_euler(kind, model, q, p, dt, xi):
    dq, dp = drift_arrays(kind, model, q, p)
    return q + dq * dt, p + dp * dt + math.sqrt(2.0 * dt) * xi


def _step_strang(kind, model, q, p, dt, xi, frictionless=False):
    """Force half-kick / exact velocity drift / friction+noise Euler / half-kick.

    The velocity map is constant in q, so the position update integrates it
    exactly; dropping the friction+noise substep gives the symplectic
    frictionless reduction used by the energy-conservation checks.
    """
    half = 0.5 * dt
    p1 = p + half * total_forces(model, q, kind.cutoff)
    vel = _velocity(kind, model, p1)
    q1 = q + dt * vel
    if not frictionless:
        p1 = p1 - dt * vel + math.sqrt(2.0 * dt) * xi
    p2 = p1 + half * total_forces(model, q1, kind.cutoff)
    return q1, p2


def _step_arrays(scheme_method, kind, model, q, p, dt, xi):
    if scheme_method == "euler-maruyama":
        return _step_euler(kind, model, q, p, dt, xi)
    return _step_strang(kind, model, q, p, dt, xi)


def _ok_mask(model, q, p):
    finite = np.all(np.isfinite(q), axis=(-2, -1)) & np.all(np.isfinite(p), axis=(-2, -1))
    return finite & (min_pair_distance(model, q) > model.delta_floor)


def step(scheme: Scheme, kind: DriftKind, model: ModelSpec, x: State, dt: float, xi) -> State:
    """One integrator step; raises :class:`StepRejected` if it leaves the domain."""
    if dt <= 0:
        raise ParameterError("step: need dt > 0")
    xi = np.asarray(xi, dtype=float)
    q1, p1 = _step_arrays(scheme.method, kind, model, x.q, x.p, dt, xi)
    if not bool(_ok_mask(model, q1, p1)):
        raise StepRejected(f"step of size {dt:.3e} left the domain")
    return State(q1, p1)


def adaptive_dt(model: ModelSpec, kind: DriftKind, x: State, dt_max: float,
                policy: Scheme) -> float:
    """Step-size policy: interaction cap delta^(beta1+1)/a4 and drift cap.

    dt_eff = min(dt_max, c_safe * delta_min^(beta1+1) / a4,
                 c_safe / (1 + |drift|_inf)); always > 0.
    """
    caps = [dt_max]
    if model.singular.active and kind.cutoff is None:
        delta = float(min_pair_distance(model, x.q))
        caps.append(policy.c_safe * delta ** (model.singular.beta1 + 1.0) / model.singular.a4)
    dq, dp = drift_arrays(kind, model, x.q, x.p)
    drift_inf = float(max(np.max(np.abs(dq)), np.max(np.abs(dp))))
    caps.append(policy.c_safe / (1.0 + drift_inf))
    return max(min(caps), 1e-300)


# ---------------------------------------------------------------------------
# adaptive simulation
# ---------------------------------------------------------------------------

def simulate(model: ModelSpec, kind: DriftKind, scheme: Scheme, x0: State,
             T: float, seed: int, stream_key: tuple = ()) -> Trajectory:
    """Integrate on [0, T] with reject-and-halve step control.

    A rejected interval is split in half with a Brownian-bridge-consistent
    split of its increment ((xi+eta)/sqrt2, (xi-eta)/sqrt2), so the driving
    path is preserved under refinement.  More than ``scheme.max_halvings``
    splits of one interval raises :class:`IntegrationFailure` with the final
    state attached.
    """
    if T < 0:
        raise ParameterError("simulate: need T >= 0")
    gen = substream(seed, _SIM_KEY, *stream_key)
    q, p = x0.q.copy(), x0.p.copy()
    n, d = q.shape
    t = 0.0
    rejections = 0
    rows_t, rows_q, rows_p, rows_dt = [0.0], [q.copy()], [p.copy()], [0.0]
    rows_rej = [0]
    pending = []  # stack of (dt, xi, depth) from refinements
    t_tol = 1e-12 * max(1.0, T)
    while T - t > t_tol:
        if pending:
            dt_i, xi, depth = pending.pop()
        else:
            dt_i = min(adaptive_dt(model, kind, State(q, p), scheme.dt, scheme), T - t)
            xi = gen.standard_normal((n, d))
            depth = 0
        q1, p1 = _step_arrays(scheme.method, kind, model, q, p, dt_i, xi)
        if bool(_ok_mask(model, q1, p1)):
            q, p = q1, p1
            t += dt_i
            rows_t.append(t)
            rows_q.append(q.copy())
            rows_p.append(p.copy())
            rows_dt.append(dt_i)
            rows_rej.append(rejections)
            continue
        rejections += 1
        if depth + 1 > scheme.max_halvings:
            raise IntegrationFailure(
                f"persistent step rejection at t={t:.6g} (depth {depth + 1})",
                t=t, state=State(q, p),
                diagnostics={"rejections": rejections, "min_dist": float(min_pair_distance(model, q))},
            )
        eta = gen.standard_normal((n, d))
        pending.append((0.5 * dt_i, (xi - eta) / _SQRT2, depth + 1))
        pending.append((0.5 * dt_i, (xi + eta) / _SQRT2, depth + 1))
    qs = np.stack(rows_q)
    ps = np.stack(rows_p)
    return Trajectory(
        times=np.asarray(rows_t),
        q=qs,
        p=ps,
        hamiltonian=hamiltonian(model, qs, ps),
        min_dist=min_pair_distance(model, qs),
        dt_eff=np.asarray(rows_dt),
        rejections=np.asarray(rows_rej, dtype=int),
        seed=seed,
        model_hash=model.content_hash(),
        scheme=scheme.to_dict(),
        kind=kind.label(),
        stream_key=tuple(stream_key),
    )


def pilot_dt(model: ModelSpec, scheme: Scheme, x0: State, T: float, seed: int,
             cutoff=None) -> float:
    """Worst-case adaptive step of the stiffer (relativistic) leg on a pilot run."""
    kind = DriftKind("relativistic", cutoff=cutoff)
    traj = simulate(model, kind, scheme, x0, min(T, 1.0), seed, stream_key=(9999,))
    eff = traj.dt_eff[1:]
    return float(min(scheme.dt, eff.min())) if eff.size else scheme.dt


# ---------------------------------------------------------------------------
# shared-noise coupling
# ---------------------------------------------------------------------------

def simulate_coupled(model: ModelSpec, scheme: Scheme, x0: State, T: float,
                     eps: float, seed: int, cutoff=None,
                     stream_key: tuple = ()) -> CoupledRun:
    """Drive relativistic(eps) and langevin legs with identical increments.

    The grid is fixed (non-adaptive) so the two legs stay synchronized; if
    either leg leaves the domain the run fails.
    """
    if T <= 0:
        raise ParameterError("simulate_coupled: need T > 0")
    rel_model = model.with_epsilon(eps)
    rel_kind = DriftKind("relativistic", cutoff=cutoff)
    lan_kind = DriftKind("langevin", cutoff=cutoff)
    n_steps = max(1, int(round(T / scheme.dt)))
    dt = T / n_steps
    gen = substream(seed, _COUPLED_KEY, *stream_key)
    n, d = x0.q.shape
    qr, pr = x0.q.copy(), x0.p.copy()
    ql, pl = x0.q.copy(), x0.p.copy()
    digest = hashlib.sha256()
    sup = 0.0
    sup_series = [0.0]
    rows = {"t": [0.0], "qr": [qr.copy()], "pr": [pr.copy()], "ql": [ql.copy()], "pl": [pl.copy()]}
    for k in range(n_steps):
        xi = gen.standard_normal((n, d))
        digest.update(xi.tobytes())
        qr, pr = _step_arrays(scheme.method, rel_kind, rel_model, qr, pr, dt, xi)
        ql, pl = _step_arrays(scheme.method, lan_kind, model, ql, pl, dt, xi)
        ok = bool(_ok_mask(rel_model, qr, pr)) and bool(_ok_mask(model, ql, pl))
        if not ok:
            raise IntegrationFailure(
                f"coupled run failed at node {k + 1}/{n_steps}",
                t=(k + 1) * dt, state=None,
                diagnostics={"sup_distance": sup, "node": k + 1},
            )
        dist = float(np.linalg.norm(qr - ql) + np.linalg.norm(pr - pl))
        sup = max(sup, dist)
        sup_series.append(sup)
        rows["t"].append((k + 1) * dt)
        rows["qr"].append(qr.copy())
        rows["pr"].append(pr.copy())
        rows["ql"].append(ql.copy())
        rows["pl"].append(pl.copy())
    inc_hash = digest.hexdigest()
    times = np.asarray(rows["t"])

    def _leg(model_leg, kind, qs, ps):
        qs = np.stack(qs)
        ps = np.stack(ps)
        return Trajectory(
            times=times, q=qs, p=ps,
            hamiltonian=hamiltonian(model_leg, qs, ps),
            min_dist=min_pair_distance(model_leg, qs),
            dt_eff=np.full_like(times, dt),
            rejections=np.zeros(len(times), dtype=int),
            seed=seed, model_hash=model_leg.content_hash(),
            scheme=scheme.to_dict(), kind=kind.label(), stream_key=tuple(stream_key),
        )

    return CoupledRun(
        relativistic=_leg(rel_model, rel_kind, rows["qr"], rows["pr"]),
        langevin=_leg(model, lan_kind, rows["ql"], rows["pl"]),
        sup_distance=np.asarray(sup_series),
        increment_hash_relativistic=inc_hash,
        increment_hash_langevin=inc_hash,  # same tensor fed to both legs
        epsilon=eps,
    )


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------

def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Order-preserving map; results depend only on items, never on threads."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def simulate_ensemble(model: ModelSpec, kind: DriftKind, scheme: Scheme, x0: State,
                      T: float, n_traj: int, master_seed: int,
                      threads: int = 1) -> EnsembleResult:
    """Independent trajectories on substreams (master_seed, k); failures are
    collected per index without aborting the batch."""
    if n_traj < 1:
        raise ParameterError("simulate_ensemble: need n_traj >= 1")

    def _run(k):
        try:
            return k, simulate(model, kind, scheme, x0, T, master_seed, stream_key=(k,))
        except IntegrationFailure as exc:
            return k, exc

    out = parallel_map(_run, list(range(n_traj)), threads)
    trajectories = [None] * n_traj
    failures = {}
    for k, res in out:
        if isinstance(res, Trajectory):
            trajectories[k] = res
        else:
            failures[k] = str(res)
    return EnsembleResult(trajectories=trajectories, failures=failures)


# ---------------------------------------------------------------------------
# vectorized fixed-grid batch drivers (internal; bitwise-identical to the
# per-seed scalar paths because each seed owns its substream)
# ---------------------------------------------------------------------------

def _seed_generators(master_seed, n_seeds, namespace, extra=()):
    return [substream(master_seed, namespace, k, *extra) for k in range(n_seeds)]


def _draw_block(gens, length, n, d):
    return np.stack([g.standard_normal((length, n, d)) for g in gens], axis=0)


def batch_paths(model: ModelSpec, kind: DriftKind, scheme_method: str, x0: State,
                dt: float, n_steps: int, master_seed: int, n_seeds: int,
                node_hook: Callable, chunk: int = 512) -> np.ndarray:
    """March ``n_seeds`` paths in lockstep on a fixed grid.

    ``node_hook(step_index, t, q, p, ok)`` is called at every node (including
    step 0); failed seeds freeze at their last valid state and are reported
    through the returned ok mask.
    """
    n, d = x0.q.shape
    gens = _seed_generators(master_seed, n_seeds, _SIM_KEY)
    q = np.broadcast_to(x0.q, (n_seeds, n, d)).copy()
    p = np.broadcast_to(x0.p, (n_seeds, n, d)).copy()
    ok = np.ones(n_seeds, dtype=bool)
    node_hook(0, 0.0, q, p, ok)
    done = 0
    while done < n_steps:
        length = min(chunk, n_steps - done)
        xis = _draw_block(gens, length, n, d)
        for j in range(length):
            q1, p1 = _step_arrays(scheme_method, kind, model, q, p, dt, xis[:, j])
            good = _ok_mask(model, q1, p1)
            upd = ok & good
            q[upd] = q1[upd]
            p[upd] = p1[upd]
            ok = ok & good  # failed seeds freeze at their last valid state
            node_hook(done + j + 1, (done + j + 1) * dt, q, p, ok)
        done += length
    return ok


def coupled_sup_batch(model: ModelSpec, scheme: Scheme, x0: State, T: float,
                      eps: float, master_seed: int, n_seeds: int,
                      powers=(1, 2), cutoff=None, chunk: int = 512):
    """Per-seed sup over the grid of |dq|^n + |dp|^n for each n in powers,
    plus the sup of |dq| + |dp| (exceedance statistic).

    Seed k draws from substream (master_seed, k) independently of eps, so
    paired comparisons across eps reuse the same noise.
    """
    rel_model = model.with_epsilon(eps)
    rel_kind = DriftKind("relativistic", cutoff=cutoff)
    lan_kind = DriftKind("langevin", cutoff=cutoff)
    n_steps = max(1, int(round(T / scheme.dt)))
    dt = T / n_steps
    n, d = x0.q.shape
    gens = _seed_generators(master_seed, n_seeds, _COUPLED_KEY)
    qr = np.broadcast_to(x0.q, (n_seeds, n, d)).copy()
    pr = np.broadcast_to(x0.p, (n_seeds, n, d)).copy()
    ql, pl = qr.copy(), pr.copy()
    ok = np.ones(n_seeds, dtype=bool)
    sup_pow = {nn: np.zeros(n_seeds) for nn in powers}
    sup_plain = np.zeros(n_seeds)
    done = 0
    while done < n_steps:
        length = min(chunk, n_steps - done)
        xis = _draw_block(gens, length, n, d)
        for j in range(length):
            xi = xis[:, j]
            qr1, pr1 = _step_arrays(scheme.method, rel_kind, rel_model, qr, pr, dt, xi)
            ql1, pl1 = _step_arrays(scheme.method, lan_kind, model, ql, pl, dt, xi)
            good = _ok_mask(rel_model, qr1, pr1) & _ok_mask(model, ql1, pl1)
            upd = ok & good
            qr[upd], pr[upd] = qr1[upd], pr1[upd]
            ql[upd], pl[upd] = ql1[upd], pl1[upd]
            ok = ok & good
            dq = np.sqrt(np.sum((qr - ql) ** 2, axis=(-2, -1)))
            dp = np.sqrt(np.sum((pr - pl) ** 2, axis=(-2, -1)))
            for nn in powers:
                np.maximum(sup_pow[nn], np.where(ok, dq ** nn + dp ** nn, sup_pow[nn]),
                           out=sup_pow[nn])
            np.maximum(sup_plain, np.where(ok, dq + dp, sup_plain), out=sup_plain)
        done += length
    return {"sup_pow": sup_pow, "sup_plain": sup_plain, "ok": ok, "dt": dt,
            "n_steps": n_steps}
