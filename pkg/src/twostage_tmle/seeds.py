"""Deterministic seed derivation for nested simulation streams.

Child seeds are derived by hashing a master seed with an integer index path
(``numpy.random.SeedSequence`` spawn keys), so partial re-runs of any
replicate, cluster, or fold reproduce the original draws exactly.
"""

from __future__ import annotations

import numpy as np


def split_seed(master: int, *path: int) -> int:
    """Derive the child seed for ``path`` under ``master`` (a uint64)."""
    ss = np.random.SeedSequence(master, spawn_key=tuple(path))
    return int(ss.generate_state(1, np.uint64)[0])
