import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from caption_conformal.conformal import (NO_ADMISSION, Mode, admission_rank, decide,
                                         outlier_threshold, p_value, threshold_at)
from caption_conformal.errors import ConfigError
from caption_conformal.io import CalibrationModel

HUNDRED = CalibrationModel.from_scores([i / 100 for i in range(1, 101)], kind="image_caption")
HUNDRED_T = CalibrationModel.from_scores([i / 100 for i in range(1, 101)], kind="knn_text")
THREE = CalibrationModel.from_scores([0.1, 0.2, 0.3], kind="knn_text")

alphas = st.floats(1e-4, 0.9999)
score_lists = st.lists(st.floats(0, 2), min_size=1, max_size=60)


def test_threshold_examples():
    assert admission_rank(0.05, 100) == 5
    assert threshold_at(HUNDRED, 0.05) == 0.05
    assert threshold_at(HUNDRED, 0.001) is NO_ADMISSION
    assert threshold_at(CalibrationModel.from_scores([0.3]), 0.5) == 0.3


def test_rank_uses_decimal_alpha():
    assert 0.29 * 100 < 29
    assert admission_rank(0.29, 99) == 29


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_alpha_outside_open_interval(alpha):
    with pytest.raises(ConfigError):
        threshold_at(HUNDRED, alpha)


@pytest.mark.parametrize("score,p", [(0.25, 0.5), (0.05, 1.0), (0.9, 0.25), (0.2, 0.75)])
def test_p_value_examples(score, p):
    pv = p_value(THREE, score)
    assert pv.p_value == p
    assert pv.required_coverage == 1.0 - p


def test_decide_examples():
    d = decide(HUNDRED, 0.04, 0.05, "tpr_control")
    assert d.admitted and d.threshold == 0.05
    d = decide(THREE, 0.9, 0.05, Mode.OUTLIER_TEST)
    assert d.admitted and d.p_value == 0.25
    d = decide(HUNDRED, 0.0, 0.001, "tpr_control")
    assert not d.admitted and d.threshold is NO_ADMISSION


def test_outlier_rejects_far_score():
    d = decide(HUNDRED_T, 1.5, 0.05, "outlier_test")
    assert not d.admitted and d.p_value == 1 / 101


def test_mode_kind_mismatch_warns():
    with pytest.warns(UserWarning):
        decide(THREE, 0.1, 0.5, "tpr_control")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        decide(THREE, 0.1, 0.5, "outlier_test")


@settings(max_examples=300, deadline=None)
@given(score_lists, alphas, alphas)
def test_threshold_monotone_in_alpha(scores, a1, a2):
    c = CalibrationModel.from_scores(scores)
    lo, hi = sorted((a1, a2))
    t_lo, t_hi = threshold_at(c, lo), threshold_at(c, hi)
    if t_lo is not NO_ADMISSION:
        assert t_hi is not NO_ADMISSION and t_lo <= t_hi


@settings(max_examples=300, deadline=None)
@given(score_lists, st.floats(0, 2), st.floats(0, 2))
def test_p_value_non_increasing(scores, s1, s2):
    c = CalibrationModel.from_scores(scores)
    lo, hi = sorted((s1, s2))
    assert p_value(c, lo).p_value >= p_value(c, hi).p_value
    assert 1 / (c.n + 1) <= p_value(c, hi).p_value <= 1.0


@settings(max_examples=400, deadline=None)
@given(score_lists, st.floats(0, 2), alphas)
def test_outlier_decision_consistent(scores, s, alpha):
    c = CalibrationModel.from_scores(scores, kind="knn_text")
    d = decide(c, s, alpha, "outlier_test")
    count = int(np.sum(c.sorted_scores >= s))
    assert d.admitted == (Fraction(1 + count, c.n + 1) > Fraction(repr(alpha)))
    assert d.admitted == (s <= outlier_threshold(c, alpha))
    assert d == decide(c, s, alpha, "outlier_test")


@settings(max_examples=300, deadline=None)
@given(score_lists, st.floats(0, 2), alphas)
def test_tpr_decision_matches_threshold(scores, s, alpha):
    c = CalibrationModel.from_scores(scores, kind="image_caption")
    d = decide(c, s, alpha, "tpr_control")
    thr = threshold_at(c, alpha)
    assert d.admitted == (thr is not NO_ADMISSION and s <= thr)


def test_finite_sample_validity_small(rng):
    # Fresh exchangeable scores land at or below the threshold w.p. r/(n+1).
    n, reps, alpha = 19, 20000, 0.1
    hits = 0
    for _ in range(reps):
        draw = rng.random(n + 1)
        thr = threshold_at(CalibrationModel.from_scores(draw[:n]), alpha)
        hits += draw[n] <= thr
    expected = admission_rank(alpha, n) / (n + 1)
    se = (expected * (1 - expected) / reps) ** 0.5
    assert abs(hits / reps - expected) < 4 * se
