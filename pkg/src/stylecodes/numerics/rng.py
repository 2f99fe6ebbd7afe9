"""Counter-based random streams keyed by integer paths.

``key(seed, step, ...)`` always yields the same Philox stream for the same
path, independent of how many draws were taken elsewhere, so results do not
depend on call order or threading.
"""

import numpy as np


def key(*path: int) -> np.random.Generator:
    ints = [int(p) & 0xFFFFFFFFFFFFFFFF for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(ints)))


def normal(shape, *path: int, dtype=np.float32) -> np.ndarray:
    return key(*path).standard_normal(shape).astype(dtype)
