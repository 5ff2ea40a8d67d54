"""Independent random streams keyed by purpose and seed."""
from __future__ import annotations

import numpy as np

# SeedSequence ignores trailing zeros, so seeds are prefixed with a purpose tag
# and their length to keep streams such as init(0) and direction([0, 0]) apart.
DATA, INIT, DIRECTION, SHUFFLE, SPECTRAL, FD_CHECK, MINE_LAMBDA, MINE_SHUFFLE = range(1, 9)


def stream(tag: int, seed) -> np.random.Generator:
    parts = [int(s) for s in np.atleast_1d(np.asarray(seed, dtype=np.int64))]
    if any(p < 0 for p in parts):
        raise ValueError("seeds must be non-negative")
    return np.random.default_rng([tag, len(parts), *parts])
