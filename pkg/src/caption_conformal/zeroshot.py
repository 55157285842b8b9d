"""Zero-shot label classifiers built from averaged caption embeddings."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .conformal import NO_ADMISSION, threshold_at
from .errors import ConfigError, DegenerateQuery, UndefinedAuroc
from .io import NEGATIVE, POSITIVE, UNKNOWN, CalibrationModel, LabelTable, ScoreKind, ScoreSeries
from .metrics import cosine_similarity_matrix, values_of
from ._kernels import DEGENERATE_NORM


@dataclass(frozen=True, eq=False)
class LabelQuery:
    label: str
    query_embedding: np.ndarray
    caption_ids: tuple = ()


def build_label_query(captions, label: str, caption_ids=()) -> LabelQuery:
    """Unit-normalised mean of the label's caption embeddings.

    Column means use ``math.fsum`` so the result does not depend on caption
    order.
    """
    v = values_of(captions).astype(np.float64)
    if v.shape[0] < 1:
        raise DegenerateQuery(f"{label}: no captions")
    mean = np.array([math.fsum(v[:, t]) for t in range(v.shape[1])]) / v.shape[0]
    sq = 0.0
    for x in mean:
        sq += x * x
    norm = math.sqrt(sq)
    if not norm >= DEGENERATE_NORM:
        raise DegenerateQuery(f"{label}: caption embeddings cancel (mean norm {norm:.3g})")
    ids = tuple(caption_ids) or tuple(range(v.shape[0]))
    q = mean / norm
    q.setflags(write=False)
    return LabelQuery(label, q, ids)


def zeroshot_scores(images, queries) -> np.ndarray:
    """Cosine similarity of every image with every label query, shape (n_images, n_labels)."""
    q = np.stack([lq.query_embedding for lq in queries]) if queries else None
    if q is None:
        return np.zeros((values_of(images).shape[0], 0))
    return cosine_similarity_matrix(images, q)


def query_distances(images, query: LabelQuery) -> np.ndarray:
    """Image-caption distance between one label query and each image."""
    return 1.0 - cosine_similarity_matrix(images, query.query_embedding[None, :])[:, 0]


@dataclass(frozen=True, eq=False)
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auroc: float


def auroc_pairwise(pos, neg) -> float:
    """Quadratic Mann-Whitney count with half credit for ties (oracle)."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAuroc("need at least one positive and one negative")
    greater = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (2 * greater + ties) / (2 * pos.size * neg.size)


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve at every distinct score and the exact tie-aware AUROC.

    ``labels`` are truthy for positives. Higher scores mean "more positive".
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ConfigError("scores and labels must have equal length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAuroc(f"need both classes, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(-s, kind="stable")
    s_desc, y_desc = s[order], y[order]
    # group boundaries of tied scores
    last = np.r_[np.nonzero(np.diff(s_desc))[0], s_desc.size - 1]
    tp = np.cumsum(y_desc)[last]
    fp = (last + 1) - tp
    pos_in = np.diff(np.r_[0, tp])
    neg_in = np.diff(np.r_[0, fp])
    # each negative is beaten by every positive in a strictly higher group
    greater = int(np.sum(neg_in * (tp - pos_in)))
    ties = int(np.sum(pos_in * neg_in))
    auroc = (2 * greater + ties) / (2 * n_pos * n_neg)
    thresholds = np.r_[np.inf, s_desc[last]]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return RocCurve(thresholds, tpr, fpr, auroc)


class Stratification(str, enum.Enum):
    PURE = "pure"
    MIXED = "mixed"


@dataclass(frozen=True, eq=False)
class Stratum:
    positives: np.ndarray
    negatives: np.ndarray


def stratify(labels: LabelTable, mode: Stratification | str,
             exclude_unknown: bool = False) -> dict[str, Stratum]:
    """Positive and negative row indices for every label.

    ``mixed`` positives are all rows positive for the label; ``pure`` keeps
    only rows where that label is the single positive. Unknown values count as
    negative unless ``exclude_unknown`` is set, in which case rows unknown for
    the label are dropped from its negatives and pure rows must be explicitly
    negative for every other label.
    """
    mode = Stratification(mode)
    a = labels.assignments
    n_pos = (a == POSITIVE).sum(axis=1)
    out = {}
    for j, name in enumerate(labels.labels):
        col = a[:, j]
        pos = col == POSITIVE
        if mode is Stratification.PURE:
            pos &= n_pos == 1
            if exclude_unknown:
                pos &= ((a == NEGATIVE) | (a == POSITIVE)).all(axis=1)
        neg = col == NEGATIVE
        if not exclude_unknown:
            neg |= col == UNKNOWN
        out[name] = Stratum(np.flatnonzero(pos), np.flatnonzero(neg))
    return out


def evaluate_tpr_fpr(calib: CalibrationModel, pos_scores, neg_scores, alpha: float):
    """Fractions of positive / negative image-caption distances admitted at level alpha."""
    pos = _score_values(pos_scores)
    neg = _score_values(neg_scores)
    thr = threshold_at(calib, alpha)
    if calib.kind is not ScoreKind.IMAGE_CAPTION:
        raise ConfigError(f"TPR/FPR needs an image_caption calibration, got {calib.kind.value}")
    if pos.size == 0 or neg.size == 0:
        raise ConfigError("TPR/FPR needs non-empty positive and negative score sets")
    if thr is NO_ADMISSION:
        return 0.0, 0.0
    return (int(np.count_nonzero(pos <= thr)) / pos.size,
            int(np.count_nonzero(neg <= thr)) / neg.size)


def _score_values(s) -> np.ndarray:
    if isinstance(s, ScoreSeries):
        return s.values
    return np.asarray(s, dtype=np.float64).reshape(-1)
