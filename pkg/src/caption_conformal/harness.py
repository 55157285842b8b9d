"""Simulation protocol, coverage tables and k-NN distance reports.

The coverage simulation repeatedly draws ``subsample`` calibration scores
without replacement (one pinned Philox stream per simulation index), thresholds
every label's positive/negative image-caption distances at each alpha, and
reports the mean and population standard deviation across simulations.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .conformal import admission_rank, check_alpha, p_value
from .errors import ConfigError, UndefinedAuroc
from .io import CalibrationModel, ScoreKind, ScoreSeries, format_float
from .knn import KnnConfig, knnd
from .metrics import rowwise_cosine_distance
from .rng import sample_without_replacement, stream
from .synth import SynthSpec, generate, split
from .zeroshot import (LabelQuery, Stratification, build_label_query, query_distances,
                       roc_auc, stratify)

DEFAULT_ALPHAS = (0.001, 0.01, 0.05, 0.1)


@dataclass
class SimulationSpec:
    alphas: Sequence[float] = DEFAULT_ALPHAS
    n_sims: int = 100
    subsample: int = 5000
    seed: int = 0
    stratification: str = "mixed"

    def __post_init__(self):
        self.alphas = tuple(check_alpha(a) for a in self.alphas)
        if not self.alphas:
            raise ConfigError("need at least one alpha")
        if int(self.n_sims) < 1:
            raise ConfigError(f"n_sims must be >= 1, got {self.n_sims}")
        if int(self.subsample) < 1:
            raise ConfigError(f"subsample must be >= 1, got {self.subsample}")
        Stratification(self.stratification)


@dataclass(frozen=True)
class CoverageRow:
    label: str
    alpha: float
    tpr_mean: float
    tpr_std: float
    fpr_mean: float
    fpr_std: float


@dataclass
class CoverageReport:
    rows: list[CoverageRow]
    spec: SimulationSpec
    model_tag: str = "model"
    label_summary: dict[str, dict] = field(default_factory=dict)

    def labels(self) -> list[str]:
        return list(dict.fromkeys(r.label for r in self.rows))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population std via fsum, independent of platform SIMD."""
    n = len(values)
    m = math.fsum(values) / n
    return m, math.sqrt(math.fsum((v - m) ** 2 for v in values) / n)


def _as_values(s) -> np.ndarray:
    if isinstance(s, ScoreSeries):
        if s.kind is not ScoreKind.IMAGE_CAPTION:
            raise ConfigError(f"coverage simulation needs image_caption scores, got {s.kind.value}")
        return s.values
    if isinstance(s, CalibrationModel):
        if s.kind is not ScoreKind.IMAGE_CAPTION:
            raise ConfigError(f"coverage simulation needs image_caption scores, got {s.kind.value}")
        return s.sorted_scores
    return np.asarray(s, dtype=np.float64).reshape(-1)


def run_coverage_sim(calib_scores, positives: Mapping[str, object],
                     negatives: Mapping[str, object], spec: SimulationSpec = SimulationSpec(),
                     model_tag: str = "model") -> CoverageReport:
    """TPR/FPR mean and std over ``spec.n_sims`` calibration subsamples.

    Each simulation is equivalent to building a CalibrationModel from the
    subsample and calling ``evaluate_tpr_fpr`` for every (label, alpha).
    """
    pool = _as_values(calib_scores)
    m = int(spec.subsample)
    if m > pool.size:
        raise ConfigError(f"subsample {m} exceeds the {pool.size} available calibration scores")
    if set(positives) != set(negatives):
        raise ConfigError("positives and negatives must cover the same labels")
    labels = list(positives)
    pos = {k: np.sort(_as_values(positives[k])) for k in labels}
    neg = {k: np.sort(_as_values(negatives[k])) for k in labels}
    for k in labels:
        if pos[k].size == 0 or neg[k].size == 0:
            raise ConfigError(f"label {k!r} needs non-empty positive and negative scores")
    ranks = [admission_rank(a, m) for a in spec.alphas]
    tpr = np.zeros((len(labels), len(ranks), spec.n_sims))
    fpr = np.zeros_like(tpr)
    for s in range(spec.n_sims):
        idx = sample_without_replacement(stream(spec.seed, s), pool.size, m)
        sub = np.sort(pool[idx])
        for j, r in enumerate(ranks):
            if r == 0:
                continue  # NoAdmission: nothing admitted
            thr = sub[r - 1]
            for i, k in enumerate(labels):
                tpr[i, j, s] = np.searchsorted(pos[k], thr, side="right") / pos[k].size
                fpr[i, j, s] = np.searchsorted(neg[k], thr, side="right") / neg[k].size
    rows = []
    for i, k in enumerate(labels):
        for j, a in enumerate(spec.alphas):
            tm, ts = mean_std(tpr[i, j].tolist())
            fm, fs = mean_std(fpr[i, j].tolist())
            rows.append(CoverageRow(k, a, tm, ts, fm, fs))
    return CoverageReport(rows, spec, model_tag)


# ---------------------------------------------------------------- rendering

def format_cell(mean: float, std: float) -> str:
    """``0.267 ± .006``: three decimals, leading zero dropped from the spread."""
    spread = f"{std:.3f}"
    if spread.startswith("0."):
        spread = spread[1:]
    return f"{mean:.3f} ± {spread}"


CSV_HEADER = "label,alpha,tpr_mean,tpr_std,fpr_mean,fpr_std"


def _csv_field(s: str) -> str:
    return f'"{s}"' if any(c in s for c in ',"\n') else s


def render_report(reports, fmt: str = "markdown") -> str:
    """Render one report, or several model tags side by side.

    Markdown follows the coverage-table layout: Label, Conformal Error Rate,
    then TPR columns and FPR columns per model tag.
    """
    if isinstance(reports, CoverageReport):
        reports = [reports]
    reports = list(reports)
    if fmt == "csv":
        multi = len(reports) > 1
        lines = [("model," if multi else "") + CSV_HEADER]
        for rep in reports:
            for r in rep.rows:
                vals = [_csv_field(r.label), format_float(r.alpha), format_float(r.tpr_mean),
                        format_float(r.tpr_std), format_float(r.fpr_mean), format_float(r.fpr_std)]
                lines.append(",".join(([_csv_field(rep.model_tag)] if multi else []) + vals))
        return "\n".join(lines) + "\n"
    if fmt not in ("markdown", "md"):
        raise ConfigError(f"unknown report format {fmt!r}")
    tags = [rep.model_tag for rep in reports]
    head = (["Label", "Conformal Error Rate"] + [f"{t} TPR" for t in tags]
            + [f"{t} FPR" for t in tags])
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    index = [{(r.label, r.alpha): r for r in rep.rows} for rep in reports]
    labels = list(dict.fromkeys(r.label for rep in reports for r in rep.rows))
    alphas = list(dict.fromkeys(r.alpha for rep in reports for r in rep.rows))
    for label in labels:
        first = True
        for a in alphas:
            cells = [label if first else "", format_float(a)]
            found = [ix.get((label, a)) for ix in index]
            cells += [format_cell(r.tpr_mean, r.tpr_std) if r else "" for r in found]
            cells += [format_cell(r.fpr_mean, r.fpr_std) if r else "" for r in found]
            lines.append("| " + " | ".join(cells) + " |")
            first = False
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ KNND report

@dataclass(frozen=True)
class LabelKnnd:
    label: str
    s_t: float
    p_value: float
    required_coverage: float
    auroc: float | None
    n_pos: int
    n_neg: int


@dataclass(eq=False)
class KnndReport:
    labels: list[LabelKnnd]
    calibration: CalibrationModel
    bin_edges: np.ndarray
    counts: np.ndarray

    def histogram_csv(self) -> str:
        lines = ["bin_left,bin_right,count"]
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            lines.append(f"{format_float(lo)},{format_float(hi)},{int(c)}")
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = ["label,s_t,p_value,required_coverage,auroc,n_pos,n_neg"]
        for r in self.labels:
            au = "" if r.auroc is None else format_float(r.auroc)
            lines.append(f"{_csv_field(r.label)},{format_float(r.s_t)},{format_float(r.p_value)},"
                         f"{format_float(r.required_coverage)},{au},{r.n_pos},{r.n_neg}")
        return "\n".join(lines) + "\n"

    def spearman(self) -> float:
        rows = [r for r in self.labels if r.auroc is not None]
        return float(stats.spearmanr([r.s_t for r in rows], [r.auroc for r in rows]).statistic)


def knnd_report(label_queries: Sequence[LabelQuery], train_captions, calib_captions,
                test_images, test_labels, k: int = 500,
                stratification: str = "pure", bins: int = 30,
                calibration: CalibrationModel | None = None) -> KnndReport:
    """Per label: k-NN distance of its query, required coverage, zero-shot AUROC.

    The calibration distribution is the k-NN distance of every calibration
    caption to the training captions (pass ``calibration`` to reuse one).
    """
    cfg = KnnConfig(k)
    if calibration is None:
        calibration = CalibrationModel.from_series(knnd(calib_captions, train_captions, cfg).series)
    queries = np.stack([q.query_embedding for q in label_queries])
    s_t = knnd(queries, train_captions, cfg).mean_distance
    strata = stratify(test_labels, stratification)
    rows = []
    for q, st in zip(label_queries, s_t):
        pv = p_value(calibration, st)
        stratum = strata.get(q.label)
        auroc, n_pos, n_neg = None, 0, 0
        if stratum is not None:
            sim = 1.0 - query_distances(test_images, q)
            n_pos, n_neg = len(stratum.positives), len(stratum.negatives)
            try:
                auroc = roc_auc(np.r_[sim[stratum.positives], sim[stratum.negatives]],
                                np.r_[np.ones(n_pos, bool), np.zeros(n_neg, bool)]).auroc
            except UndefinedAuroc:
                auroc = None
        rows.append(LabelKnnd(q.label, float(st), pv.p_value, pv.required_coverage,
                              auroc, n_pos, n_neg))
    counts, edges = np.histogram(calibration.sorted_scores, bins=bins)
    return KnndReport(rows, calibration, edges, counts)


# ---------------------------------------------------- synthetic scenarios

def binomial_interval(n: int, p: float, level: float = 0.99) -> tuple[float, float]:
    """Exact two-sided binomial interval for a success fraction out of n trials."""
    tail = (1.0 - level) / 2
    dist = stats.binom(n, p)
    return float(dist.ppf(tail)) / n, float(dist.ppf(1.0 - tail)) / n


# geometry used by the shift scenarios: 16-d embeddings, per-coordinate noise 0.25
SCENARIO_DIM = 16
SCENARIO_SIGMA = 0.25


@dataclass(frozen=True)
class ShiftedTpr:
    alpha: float
    admitted: float
    expected: float
    n_test: int


def shifted_query_tpr(delta: float, alphas=DEFAULT_ALPHAS, n_calib: int = 5000,
                      n_test: int = 20000, dim: int = SCENARIO_DIM,
                      sigma: float = SCENARIO_SIGMA, seed: int = 0, n_sims: int = 1,
                      pool: int | None = None) -> list[ShiftedTpr]:
    """Admitted fraction of fresh query-caption / image pairs at each alpha.

    Calibration: true caption/image pairs of single-label samples. Test: each
    held-out image is paired with its own freshly drawn query caption for its
    label, shifted by ``delta``. At delta = 0 test and calibration pairs are
    exchangeable, so the admitted fraction should sit at r / (n + 1).

    With ``n_sims > 1`` the admitted fraction is the mean over ``n_sims``
    calibration subsamples of size ``n_calib`` drawn from a pool of ``pool``
    pairs (default ``n_calib * n_sims``), as in the coverage tables.
    """
    pool = n_calib * n_sims if pool is None else int(pool)
    if pool < n_calib:
        raise ConfigError(f"calibration pool {pool} is smaller than n_calib {n_calib}")
    spec = SynthSpec(dim=dim, n_pairs=pool + n_test, sigma_img=sigma, sigma_txt=sigma,
                     query_shift=delta, n_query_captions=n_test, seed=seed)
    ds = generate(spec)
    scores = rowwise_cosine_distance(ds.captions.values[:pool], ds.images.values[:pool])
    label_of = ds.labels.assignments[pool:].argmax(axis=1)
    stacked = np.stack([ds.query_captions[name].values for name in ds.labels.labels])
    queries = stacked[label_of, np.arange(n_test)]
    test = rowwise_cosine_distance(queries, ds.images.values[pool:])
    if n_sims == 1 and pool == n_calib:
        calib = CalibrationModel.from_scores(scores)
        admitted = []
        for a in alphas:
            r = admission_rank(a, n_calib)
            thr = calib.sorted_scores[r - 1] if r else -np.inf
            admitted.append(float(np.count_nonzero(test <= thr)) / n_test)
    else:
        sim = SimulationSpec(alphas=tuple(alphas), n_sims=n_sims, subsample=n_calib, seed=seed)
        report = run_coverage_sim(scores, {"test": test}, {"test": test}, sim)
        admitted = [row.tpr_mean for row in report.rows]
    return [ShiftedTpr(a, adm, admission_rank(a, n_calib) / (n_calib + 1), n_test)
            for a, adm in zip(alphas, admitted)]


GRADED_SHIFTS = (0.0, 0.5, 1.0, 2.0, 4.0)


def graded_shift_benchmark(seed: int = 0, shifts=GRADED_SHIFTS, k: int = 500,
                           n_pairs: int = 6000, dim: int = SCENARIO_DIM,
                           sigma: float = SCENARIO_SIGMA, mix_prob: float = 0.2) -> KnndReport:
    """One label per shift value; AUROC on pure test rows against query k-NN distance."""
    spec = SynthSpec(dim=dim, n_pairs=n_pairs, n_labels=len(shifts), sigma_img=sigma,
                     sigma_txt=sigma, mix_prob=mix_prob, query_shift=list(shifts), seed=seed)
    ds = generate(spec)
    parts = split(ds, seed=seed)
    queries = [build_label_query(ds.query_captions[name], name) for name in ds.labels.labels]
    return knnd_report(queries, ds.captions.take(parts["train"]),
                       ds.captions.take(parts["calib"]), ds.images.take(parts["test"]),
                       ds.labels.take(parts["test"]), k=min(k, len(parts["train"])))


def report_to_dict(report: CoverageReport) -> dict:
    return {"model_tag": report.model_tag, "spec": asdict(report.spec),
            "rows": [asdict(r) for r in report.rows], "label_summary": report.label_summary}
