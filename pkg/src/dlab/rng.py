"""Per-path counter-based random streams.

Path ``i`` of an ensemble with master seed ``seed`` always draws from a Philox
stream keyed by ``(mix(seed, stream), i)``.  The output of path ``i`` therefore
depends only on ``(seed, stream, i)`` and never on how many paths are drawn,
in which order, or by how many threads.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

_MASK64 = (1 << 64) - 1

# stream tags; distinct tags give statistically independent families
BROWNIAN = 0
FBM = 1


def _key_word(seed: int, stream: int) -> int:
    ss = np.random.SeedSequence([int(seed) & _MASK64, int(stream)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def path_generator(seed: int, index: int, stream: int = BROWNIAN) -> np.random.Generator:
    """Generator for a single path; a pure function of its arguments."""
    key = np.array([_key_word(seed, stream), int(index) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def standard_normals(seed, indices, shape, stream=BROWNIAN, workers=1):
    """Stack of standard normal draws, one block of ``shape`` per path index.

    Parameters
    ----------
    seed : int
        Master seed.
    indices : sequence of int
        Global path indices to draw.
    shape : tuple of int
        Shape of the block drawn for every path.
    stream : int
        Stream tag separating independent families (Brownian, fBm, ...).
    workers : int
        Thread count.  Results are identical for every value.

    Returns
    -------
    ndarray of shape ``(len(indices),) + shape``
    """
    indices = np.asarray(indices, dtype=np.int64).ravel()
    shape = tuple(int(s) for s in shape)
    out = np.empty((len(indices),) + shape)
    word = _key_word(seed, stream)

    def fill(lo, hi):
        for j in range(lo, hi):
            key = np.array([word, int(indices[j]) & _MASK64], dtype=np.uint64)
            np.random.Generator(np.random.Philox(key=key)).standard_normal(shape, out=out[j])

    n = len(indices)
    if workers <= 1 or n < 2:
        fill(0, n)
    else:
        bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda ab: fill(*ab), zip(bounds[:-1], bounds[1:])))
    return out
