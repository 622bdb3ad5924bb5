"""Deterministic random-number substreams.

Substream contract (normative): the unit of work ``k`` under master seed ``s``
draws from ``Philox`` keyed by ``SeedSequence(s, spawn_key=(k, ...))``.  Philox
is a 64-bit counter-based generator, so substreams are independent and the
mapping (seed, key) -> stream does not depend on worker count or scheduling
order.  Every stochastic routine in the package documents its spawn keys.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream", "MASTER"]

# spawn-key namespaces, one per consumer, so unrelated routines never collide
MASTER = 0


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return the generator for substream ``key`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
