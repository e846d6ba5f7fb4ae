"""Deterministic random streams.

Every random draw in the package comes from a named stream derived from the
single top-level experiment seed. Streams are stateless to create, so any
point in training (a step, a sweep, a synthetic round) can rebuild exactly
the generator it used, which is what makes checkpoint resume bit-exact.
"""

from __future__ import annotations

import hashlib

import numpy as np


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for stream `name` under `seed`. Same args, same stream."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype=np.uint32)
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [int(w) for w in words])
    return np.random.Generator(np.random.PCG64(ss))
