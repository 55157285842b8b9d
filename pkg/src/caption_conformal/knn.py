"""Mean k-nearest-neighbour cosine distance of captions to a training set.

Neighbours are the k smallest cosine distances, ties broken by the smaller
training-row index. A query that is itself a training row is *not* excluded;
for leave-one-out pass ``k + 1`` and drop the leading zero.

The mean is ``math.fsum(distances) / k``, correctly rounded and independent of
neighbour order, so both the compiled path and the brute-force oracle give
the same bits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import as_f64_transposed, knn_select
from .errors import ConfigError, ShapeError
from .io import ScoreKind, ScoreSeries
from .metrics import DEFAULT_BLOCK_ROWS, _checked_sq_norms, values_of

DEFAULT_K = 500


@dataclass(frozen=True)
class KnnConfig:
    k: int = DEFAULT_K
    block_rows: int = DEFAULT_BLOCK_ROWS

    def __post_init__(self):
        if int(self.k) < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if int(self.block_rows) < 1:
            raise ConfigError(f"block_rows must be >= 1, got {self.block_rows}")


@dataclass(frozen=True, eq=False)
class KnnResult:
    """Batched neighbours: row q holds query q's k neighbours in (distance, index) order."""

    mean_distance: np.ndarray      # (n_query,)
    neighbor_indices: np.ndarray   # (n_query, k)
    neighbor_distances: np.ndarray  # (n_query, k)
    k: int

    def __len__(self):
        return self.mean_distance.shape[0]

    @property
    def series(self) -> ScoreSeries:
        return ScoreSeries(ScoreKind.KNN_TEXT, self.mean_distance, {"k": self.k})


def _prepare(query, train, cfg: KnnConfig):
    q, x = values_of(query), values_of(train)
    if q.shape[0] and q.shape[1] != x.shape[1]:
        raise ShapeError(f"dimension mismatch: queries d={q.shape[1]}, train d={x.shape[1]}")
    if cfg.k > x.shape[0]:
        raise ConfigError(f"k exceeds training rows (k={cfg.k}, rows={x.shape[0]})")
    return q, x


def _means(dists: np.ndarray, k: int) -> np.ndarray:
    return np.array([math.fsum(row) / k for row in dists], dtype=np.float64)


def _empty(k):
    return KnnResult(np.zeros(0), np.zeros((0, k), dtype=np.int64), np.zeros((0, k)), k)


def knnd(query, train, cfg: KnnConfig = KnnConfig()) -> KnnResult:
    """Exact mean k-NN cosine distance of each query row to ``train``.

    Blocked kernel with a bounded max-heap per query; output does not depend on
    ``cfg.block_rows`` or the thread count.
    """
    q, x = _prepare(query, train, cfg)
    k = int(cfg.k)
    if q.shape[0] == 0:
        return _empty(k)
    sqq = _checked_sq_norms(q, "query")
    sqx = _checked_sq_norms(x, "training")
    out_d = np.empty((q.shape[0], k), dtype=np.float64)
    out_i = np.empty((q.shape[0], k), dtype=np.int64)
    block = min(int(cfg.block_rows), x.shape[0])
    knn_select(np.ascontiguousarray(q, dtype=np.float64), sqq, as_f64_transposed(x), sqx,
               k, block, out_d, out_i)
    return KnnResult(_means(out_d, k), out_i, out_d, k)


def knnd_bruteforce(query, train, cfg: KnnConfig = KnnConfig()) -> KnnResult:
    """Reference path: full distance row per query, full sort, first k."""
    q, x = _prepare(query, train, cfg)
    k = int(cfg.k)
    if q.shape[0] == 0:
        return _empty(k)
    sqq = _checked_sq_norms(q, "query")
    sqx = _checked_sq_norms(x, "training")
    xt = as_f64_transposed(x)
    order_idx = np.arange(x.shape[0])
    out_d = np.empty((q.shape[0], k))
    out_i = np.empty((q.shape[0], k), dtype=np.int64)
    for r in range(q.shape[0]):
        qrow = q[r].astype(np.float64)
        dot = np.zeros(x.shape[0])
        for t in range(x.shape[1]):
            dot += qrow[t] * xt[t]
        dist = 1.0 - np.clip(dot / np.sqrt(sqq[r] * sqx), -1.0, 1.0)
        order = np.lexsort((order_idx, dist))[:k]
        out_i[r] = order
        out_d[r] = dist[order]
    return KnnResult(_means(out_d, k), out_i, out_d, k)
