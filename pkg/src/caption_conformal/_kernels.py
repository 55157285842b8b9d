"""Compiled cosine kernels.

Summation-order contract: every dot product and squared norm is accumulated
in float64, one term at a time, in ascending coordinate index, with separate
multiply and add (no fused multiply-add, no reassociation). Cosine similarity
is ``dot / sqrt(sq_a * sq_b)`` clamped to [-1, 1]. Any implementation that
follows these steps (the pure-Python reference, the numpy column loops, the
tiled kernels below) produces bit-identical values, independent of tile size
and thread count.
"""
import math

import numba
import numpy as np

# TBB in this image is too old; workqueue is always available
numba.config.THREADING_LAYER = "workqueue"

DEGENERATE_NORM = 1e-12

QUERY_BLOCK = 32


def set_threads(n: int | None) -> int:
    """Set the compiled-kernel thread count; returns the value actually used."""
    limit = numba.config.NUMBA_NUM_THREADS
    n = limit if n is None else max(1, min(int(n), limit))
    numba.set_num_threads(n)
    return n


def row_sq_norms(values) -> np.ndarray:
    """Squared L2 norm of each row, summed in ascending coordinate order."""
    v = np.asarray(values)
    acc = np.zeros(v.shape[0], dtype=np.float64)
    for t in range(v.shape[1]):
        col = v[:, t].astype(np.float64)
        acc += col * col
    return acc


def rowwise_dots(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    acc = np.zeros(a.shape[0], dtype=np.float64)
    for t in range(a.shape[1]):
        acc += a[:, t].astype(np.float64) * b[:, t].astype(np.float64)
    return acc


def as_f64_transposed(values) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64).T)


@numba.njit(parallel=True, cache=True)
def cosine_block(A, sqa, BT, sqb, block_rows, out):
    """out[i, j] = clamped cosine similarity of A[i] and column j of BT."""
    na, d = A.shape
    nb = BT.shape[1]
    nblocks = (na + QUERY_BLOCK - 1) // QUERY_BLOCK
    for blk in numba.prange(nblocks):
        i0 = blk * QUERY_BLOCK
        i1 = min(na, i0 + QUERY_BLOCK)
        m = i1 - i0
        acc = np.empty((m, block_rows))
        for j0 in range(0, nb, block_rows):
            w = min(nb, j0 + block_rows) - j0
            for qi in range(m):
                for j in range(w):
                    acc[qi, j] = 0.0
            for t in range(d):
                for qi in range(m):
                    av = A[i0 + qi, t]
                    for j in range(w):
                        acc[qi, j] += av * BT[t, j0 + j]
            for qi in range(m):
                s = sqa[i0 + qi]
                for j in range(w):
                    c = acc[qi, j] / math.sqrt(s * sqb[j0 + j])
                    if c > 1.0:
                        c = 1.0
                    elif c < -1.0:
                        c = -1.0
                    out[i0 + qi, j0 + j] = c


@numba.njit(inline="always")
def _before(d1, i1, d2, i2):
    # lexicographic (distance, index) order
    return d1 < d2 or (d1 == d2 and i1 < i2)


@numba.njit(parallel=True, cache=True)
def knn_select(Q, sqq, XT, sqx, k, block_rows, out_d, out_i):
    """Exact k smallest cosine distances per query row, sorted by (distance, index).

    Distances are streamed tile by tile into a bounded max-heap of size k
    ordered by (distance, index); the heap root is the current worst kept
    neighbour.
    """
    nq, d = Q.shape
    nt = XT.shape[1]
    nblocks = (nq + QUERY_BLOCK - 1) // QUERY_BLOCK
    for blk in numba.prange(nblocks):
        q0 = blk * QUERY_BLOCK
        q1 = min(nq, q0 + QUERY_BLOCK)
        m = q1 - q0
        acc = np.empty((m, block_rows))
        hd = np.empty((m, k))
        hi = np.empty((m, k), dtype=np.int64)
        hs = np.zeros(m, dtype=np.int64)
        for j0 in range(0, nt, block_rows):
            w = min(nt, j0 + block_rows) - j0
            for qi in range(m):
                for j in range(w):
                    acc[qi, j] = 0.0
            for t in range(d):
                for qi in range(m):
                    qv = Q[q0 + qi, t]
                    for j in range(w):
                        acc[qi, j] += qv * XT[t, j0 + j]
            for qi in range(m):
                s = sqq[q0 + qi]
                for j in range(w):
                    c = acc[qi, j] / math.sqrt(s * sqx[j0 + j])
                    if c > 1.0:
                        c = 1.0
                    elif c < -1.0:
                        c = -1.0
                    dist = 1.0 - c
                    idx = j0 + j
                    n = hs[qi]
                    if n < k:
                        pos = n
                        while pos > 0:
                            par = (pos - 1) >> 1
                            if _before(hd[qi, par], hi[qi, par], dist, idx):
                                hd[qi, pos] = hd[qi, par]
                                hi[qi, pos] = hi[qi, par]
                                pos = par
                            else:
                                break
                        hd[qi, pos] = dist
                        hi[qi, pos] = idx
                        hs[qi] = n + 1
                    elif _before(dist, idx, hd[qi, 0], hi[qi, 0]):
                        _sift_down(hd[qi], hi[qi], k, dist, idx)
        # heap-sort each heap in place: repeatedly move the max to the end
        for qi in range(m):
            for end in range(k - 1, 0, -1):
                top_d = hd[qi, 0]
                top_i = hi[qi, 0]
                _sift_down(hd[qi], hi[qi], end, hd[qi, end], hi[qi, end])
                hd[qi, end] = top_d
                hi[qi, end] = top_i
            for r in range(k):
                out_d[q0 + qi, r] = hd[qi, r]
                out_i[q0 + qi, r] = hi[qi, r]


@numba.njit(cache=True)
def _sift_down(hd, hi, size, dist, idx):
    """Place (dist, idx) at the root of the max-heap hd[:size] and restore order."""
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        child = left
        right = left + 1
        if right < size and _before(hd[left], hi[left], hd[right], hi[right]):
            child = right
        if _before(dist, idx, hd[child], hi[child]):
            hd[pos] = hd[child]
            hi[pos] = hi[child]
            pos = child
        else:
            break
    hd[pos] = dist
    hi[pos] = idx
