"""Split-conformal thresholds, p-values and admit/outlier decisions.

Two usages share one calibration model:

* ``tpr_control`` thresholds image-caption distances. The threshold is the
  r-th smallest calibration score with ``r = floor(alpha * (n + 1))``, so a
  fresh exchangeable score falls at or below it with probability
  ``r / (n + 1) <= alpha``. When r = 0 nothing is admitted.
* ``outlier_test`` flags captions whose k-NN distance is unusually *high*.
  The conformal p-value is ``(1 + #{calibration >= score}) / (n + 1)`` and a
  caption is admitted when ``p > alpha``. ``1 - p`` is the coverage level one
  would have to request before the caption is admitted.

Large k-NN distance (a caption unlike the training text) is treated as the
outlier direction.
"""
from __future__ import annotations

import enum
import math
import warnings
from bisect import bisect_left
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Mapping

from .errors import ConfigError
from .io import CalibrationModel, ScoreKind


class Mode(str, enum.Enum):
    TPR_CONTROL = "tpr_control"
    OUTLIER_TEST = "outlier_test"


class NoAdmission(enum.Enum):
    """Threshold sentinel: the rank formula gave r = 0, nothing is admitted."""

    NO_ADMISSION = "NoAdmission"

    def __repr__(self):
        return "NoAdmission"


NO_ADMISSION = NoAdmission.NO_ADMISSION

_EXPECTED_KIND = {Mode.TPR_CONTROL: ScoreKind.IMAGE_CAPTION,
                  Mode.OUTLIER_TEST: ScoreKind.KNN_TEXT}


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0):
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha!r}")
    return alpha


def admission_rank(alpha: float, n: int) -> int:
    """floor(alpha * (n + 1)), with alpha taken at its shortest decimal value.

    Using the decimal value keeps e.g. alpha=0.29, n=99 at rank 29 instead of
    the 28 that the binary product 0.29 * 100 would floor to.
    """
    return math.floor(Fraction(repr(check_alpha(alpha))) * (n + 1))


def threshold_at(calib: CalibrationModel, alpha: float):
    """r-th smallest calibration score, or NO_ADMISSION when r = 0."""
    r = admission_rank(alpha, calib.n)
    if r == 0:
        return NO_ADMISSION
    return float(calib.sorted_scores[r - 1])


@dataclass(frozen=True)
class RequiredCoverage:
    p_value: float
    required_coverage: float


def count_at_least(calib: CalibrationModel, score: float) -> int:
    return calib.n - bisect_left(calib.sorted_scores, score)


def p_value(calib: CalibrationModel, score: float) -> RequiredCoverage:
    score = float(score)
    if not math.isfinite(score) or score < 0.0:
        raise ConfigError(f"score must be finite and >= 0, got {score!r}")
    p = (1 + count_at_least(calib, score)) / (calib.n + 1)
    return RequiredCoverage(p, 1.0 - p)


def outlier_threshold(calib: CalibrationModel, alpha: float) -> float:
    """Largest score the outlier test still admits at level alpha.

    p > alpha holds exactly when at least r = floor(alpha * (n + 1))
    calibration scores are >= the query score.
    """
    r = admission_rank(alpha, calib.n)
    if r == 0:
        return math.inf
    return float(calib.sorted_scores[calib.n - r])


@dataclass(frozen=True)
class ConformalDecision:
    admitted: bool
    score: float
    alpha: float
    mode: Mode
    threshold: Any
    p_value: float
    calibration: Mapping[str, Any] = field(default_factory=dict)


def decide(calib: CalibrationModel, score: float, alpha: float,
           mode: Mode | str) -> ConformalDecision:
    mode = Mode(mode)
    alpha = check_alpha(alpha)
    if calib.kind is not _EXPECTED_KIND[mode]:
        warnings.warn(f"{mode.value} is meant for {_EXPECTED_KIND[mode].value} scores, "
                      f"calibration holds {calib.kind.value}", stacklevel=2)
    pv = p_value(calib, score)
    if mode is Mode.TPR_CONTROL:
        thr = threshold_at(calib, alpha)
        admitted = thr is not NO_ADMISSION and float(score) <= thr
    else:
        thr = outlier_threshold(calib, alpha)
        c = count_at_least(calib, score)
        admitted = Fraction(1 + c, calib.n + 1) > Fraction(repr(alpha))
    return ConformalDecision(bool(admitted), float(score), alpha, mode, thr, pv.p_value,
                             {"kind": calib.kind.value, "n": calib.n})
