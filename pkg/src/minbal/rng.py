"""Deterministic random-stream derivation.

Every randomized routine in the package draws from a stream addressed by
``(master_seed, *path)``, where ``path`` is a tuple of small integers
naming the consumer (replication index, grid index, bootstrap replicate,
...).  Streams are independent PCG64 generators derived through
``numpy.random.SeedSequence`` spawn keys, so results do not depend on
execution order or worker scheduling, and any consumer can be replayed in
isolation.

Normal variates are produced by inverting the Gaussian CDF on uniform
draws rather than by rejection sampling, which pins the exact stream of
values to the uniform stream.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator addressed by ``(seed, *path)``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(path)))


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Inverse-CDF standard normal draws from ``rng``'s uniform stream."""
    u = rng.random(size)
    # Guard the open interval; ndtri(0) would be -inf.
    return ndtri(np.clip(u, 1e-300, 1.0 - 1e-16))
