"""Cosine similarity / distance and row normalisation.

All routines here follow the summation-order contract in ``_kernels``; the
vectorised and tiled paths are bit-identical to :func:`cosine_distance`
applied in a loop.
"""
from __future__ import annotations

import enum
import math

import numpy as np

from ._kernels import (DEGENERATE_NORM, as_f64_transposed, cosine_block,
                       row_sq_norms, rowwise_dots)
from .errors import DegenerateRow, ShapeError
from .io import EmbeddingMatrix, ScoreKind, ScoreSeries

DEFAULT_BLOCK_ROWS = 1024


class Pairing(str, enum.Enum):
    ROWWISE = "rowwise"
    CROSS = "cross"


def values_of(m) -> np.ndarray:
    """Raw 2-D array behind an EmbeddingMatrix or array-like."""
    v = m.values if isinstance(m, EmbeddingMatrix) else np.asarray(m)
    if v.ndim == 1:
        v = v[None, :]
    if v.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {v.shape}")
    return v


def _checked_sq_norms(v: np.ndarray, what: str) -> np.ndarray:
    sq = row_sq_norms(v)
    bad = ~np.isfinite(sq) | (np.sqrt(sq) < DEGENERATE_NORM)
    if bad.any():
        raise DegenerateRow(int(np.argmax(bad)), f"degenerate {what} row")
    return sq


def cosine_distance(x, y) -> float:
    """Scalar reference: ``1 - x.y / (|x| |y|)``, clamped to [0, 2].

    This plain loop is the oracle every faster path is tested against.
    """
    x = [float(v) for v in np.asarray(x).reshape(-1)]
    y = [float(v) for v in np.asarray(y).reshape(-1)]
    if len(x) != len(y):
        raise ShapeError(f"dimension mismatch: {len(x)} vs {len(y)}")
    dot = sxx = syy = 0.0
    for a, b in zip(x, y):
        dot += a * b
        sxx += a * a
        syy += b * b
    if not math.sqrt(sxx) >= DEGENERATE_NORM or not math.sqrt(syy) >= DEGENERATE_NORM:
        raise DegenerateRow(0, "degenerate vector")
    # sqrt of the product (not product of sqrts) makes cosine(x, x) exactly 1
    c = dot / math.sqrt(sxx * syy)
    c = min(1.0, max(-1.0, c))
    return 1.0 - c


def cosine_similarity_matrix(a, b, block_rows: int = DEFAULT_BLOCK_ROWS) -> np.ndarray:
    """Cross cosine similarities, shape (len(a), len(b)), clamped to [-1, 1]."""
    av, bv = values_of(a), values_of(b)
    if av.shape[1] != bv.shape[1]:
        raise ShapeError(f"dimension mismatch: {av.shape[1]} vs {bv.shape[1]}")
    sqa = _checked_sq_norms(av, "left")
    sqb = _checked_sq_norms(bv, "right")
    out = np.empty((av.shape[0], bv.shape[0]), dtype=np.float64)
    if out.size:
        cosine_block(np.ascontiguousarray(av, dtype=np.float64), sqa,
                     as_f64_transposed(bv), sqb, int(block_rows), out)
    return out


def rowwise_cosine_distance(a, b) -> np.ndarray:
    av, bv = values_of(a), values_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"rowwise pairing needs equal shapes, got {av.shape} and {bv.shape}")
    sqa = _checked_sq_norms(av, "caption")
    sqb = _checked_sq_norms(bv, "image")
    c = np.clip(rowwise_dots(av, bv) / np.sqrt(sqa * sqb), -1.0, 1.0)
    return 1.0 - c


def pairwise_s_i(captions, images, pairing: Pairing | str = Pairing.ROWWISE):
    """Image-caption non-conformity scores.

    ``rowwise`` pairs caption i with image i and returns a ScoreSeries;
    ``cross`` returns the full (n_captions, n_images) distance matrix.
    """
    pairing = Pairing(pairing)
    if pairing is Pairing.ROWWISE:
        return ScoreSeries(ScoreKind.IMAGE_CAPTION, rowwise_cosine_distance(captions, images))
    return 1.0 - cosine_similarity_matrix(captions, images)


def normalize_rows(m) -> EmbeddingMatrix:
    v = values_of(m)
    sq = _checked_sq_norms(v, "input")
    out = v.astype(np.float64) / np.sqrt(sq)[:, None]
    tag = m.source_tag if isinstance(m, EmbeddingMatrix) else ""
    return EmbeddingMatrix(out, tag)
