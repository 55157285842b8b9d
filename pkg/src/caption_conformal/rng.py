"""Pinned random streams for reproducible resampling.

Generator: numpy's Philox4x64-10 counter-based bit generator, keyed by
``SeedSequence([seed, stream_index])`` so every simulation index gets its own
independent stream regardless of execution order.

Index draws do not go through ``Generator.integers`` (whose algorithm numpy may
change). A draw below ``m`` is ``floor(u * m)`` with ``u = (raw >> 11) * 2**-53``
taken from the raw 64-bit Philox output. The bias this leaves is below
``m / 2**53``.
"""
from __future__ import annotations

import numba
import numpy as np


def stream(seed: int, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def uniform53(gen: np.random.Generator, size: int) -> np.ndarray:
    raw = gen.bit_generator.random_raw(size)
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53


@numba.njit(cache=True)
def _partial_shuffle(perm, u, m):
    n = perm.shape[0]
    for i in range(m):
        span = n - i
        j = i + min(int(u[i] * span), span - 1)
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp


def sample_without_replacement(gen: np.random.Generator, n: int, m: int) -> np.ndarray:
    """m distinct indices from range(n), via the first m steps of Fisher-Yates."""
    if not 0 <= m <= n:
        raise ValueError(f"cannot draw {m} of {n} without replacement")
    perm = np.arange(n, dtype=np.int64)
    if m:
        _partial_shuffle(perm, uniform53(gen, m), m)
    return perm[:m].copy()


def permutation(gen: np.random.Generator, n: int) -> np.ndarray:
    return sample_without_replacement(gen, n, n)
