"""Reproducible random streams.

Every random draw in the package comes from a Philox generator keyed by a
single master seed plus a tuple of integer stream ids, so any sub-computation
can be replayed in isolation.
"""

import hashlib

import numpy as np

# Stream ids for the sub-computations of problem generation.
OPERATOR = 1
SIGNAL = 2
NOISE = 3
PROBES = 4
DIVERGENCE = 5
POWER = 6


def generator(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(master_seed: int, *keys: int) -> int:
    """Stable 63-bit seed from a master seed and integer keys."""
    h = hashlib.sha256(repr((int(master_seed),) + tuple(int(k) for k in keys)).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def rademacher(rng: np.random.Generator, size) -> np.ndarray:
    return rng.integers(0, 2, size=size).astype(float) * 2.0 - 1.0
