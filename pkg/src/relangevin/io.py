"""Artifact writers: fixed-column CSV/JSONL data files, JSON reports, and the
run manifest.

Float formatting uses shortest round-trip repr, so identical computations
produce byte-identical files; wall time lives only in the manifest, which is
excluded from the reproducibility comparison.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_table(path: Path, columns, rows, header_comments=(), fmt_mode="csv"):
    """Write rows either as CSV with '#' header comments or as JSONL."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt_mode == "jsonl":
        with open(path, "w") as fh:
            for row in rows:
                rec = {c: (float(v) if isinstance(v, (float, np.floating)) else
                           int(v) if isinstance(v, (int, np.integer)) else v)
                       for c, v in zip(columns, row)}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path
    with open(path, "w") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    return path


def state_columns(n, d):
    qcols = [f"q_{i}_{k}" for i in range(n) for k in range(d)]
    pcols = [f"p_{i}_{k}" for i in range(n) for k in range(d)]
    return qcols, pcols


def write_trajectory(path: Path, traj, fmt_mode="csv"):
    """Trajectory file: header block then rows
    (t, q..., p..., H, delta_min, dt_eff, rejections)."""
    n, d = traj.q.shape[1:]
    qcols, pcols = state_columns(n, d)
    columns = ["t"] + qcols + pcols + ["H", "delta_min", "dt_eff", "rejections"]
    header = [
        f"model_hash={traj.model_hash}",
        f"seed={traj.seed}",
        f"scheme={json.dumps(traj.scheme, sort_keys=True)}",
        f"kind={traj.kind}",
        "columns: t, q_(particle)_(coord)..., p_(particle)_(coord)..., "
        "H, delta_min, dt_eff, rejections",
    ]

    def rows():
        for i in range(len(traj.times)):
            yield ([traj.times[i]] + list(traj.q[i].ravel()) + list(traj.p[i].ravel())
                   + [traj.hamiltonian[i], traj.min_dist[i], traj.dt_eff[i],
                      int(traj.rejections[i])])

    return write_table(path, columns, rows(), header, fmt_mode)


def write_samples(path: Path, sample, fmt_mode="csv"):
    """Stationary samples in the trajectory schema with the t column omitted."""
    n, d = sample.q.shape[1:]
    qcols, pcols = state_columns(n, d)
    columns = qcols + pcols + ["chain"]
    header = [
        f"seed={sample.seed}",
        f"epsilon={fmt(sample.epsilon)}",
        f"chains={sample.chains}",
        "columns: q_(particle)_(coord)..., p_(particle)_(coord)..., chain",
    ]
    chain_ids = np.repeat(np.arange(sample.chains), sample.per_chain)

    def rows():
        for i in range(sample.n_samples):
            yield (list(sample.q[i].ravel()) + list(sample.p[i].ravel())
                   + [int(chain_ids[i])])

    return write_table(path, columns, rows(), header, fmt_mode)


def write_json(path: Path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_coerce)
        fh.write("\n")
    return path


def _coerce(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x)}")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=_coerce).encode()).hexdigest()[:16]


def write_manifest(out_dir: Path, config: dict, seed: int, artifacts, wall_time: float):
    """Manifest sufficient to reproduce the run; artifact hashes cover the
    data files so reproducibility checks can ignore the manifest itself."""
    from . import __version__

    out_dir = Path(out_dir)
    payload = {
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "versions": {
            "relangevin": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "wall_time_s": wall_time,
        "artifacts": {Path(a).name: file_sha256(a) for a in artifacts},
    }
    return write_json(out_dir / "manifest.json", payload)
