"""Synthetic paired caption/image embeddings with known geometry.

Each sample carries one primary label (uniform) plus every other label
independently with probability ``mix_prob``. Its latent direction is the
normalised sum of the active label directions (plus optional isotropic latent
noise); caption and image are independent noisy, re-normalised copies of the
latent. Query captions for a label start from the label direction and are
pushed by ``query_shift`` along a unit vector orthogonal to every label
direction, which breaks exchangeability with the training captions in a
controlled way.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from ._kernels import row_sq_norms
from .errors import ConfigError
from .io import (DEFAULT_LABELS, EmbeddingMatrix, LabelTable, NEGATIVE, POSITIVE,
                 store_labels, store_npy)
from .rng import permutation, stream

DEFAULT_SPLIT = {"train": 0.72, "val": 0.08, "calib": 0.1, "test": 0.1}


@dataclass
class SynthSpec:
    dim: int = 32
    n_pairs: int = 1000
    n_labels: int = 4
    sigma_img: float = 0.1
    sigma_txt: float = 0.1
    latent_noise: float = 0.0
    mix_prob: float = 0.0
    query_shift: float | Sequence[float] = 0.0
    n_query_captions: int = 5
    label_names: Sequence[str] | None = None
    label_directions: Sequence[Sequence[float]] | None = None
    group_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.n_pairs < 1 or self.n_labels < 1:
            raise ConfigError("dim, n_pairs and n_labels must be >= 1")
        for name in ("sigma_img", "sigma_txt", "latent_noise"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v!r}")
        if not 0.0 <= self.mix_prob <= 1.0:
            raise ConfigError(f"mix_prob must lie in [0, 1], got {self.mix_prob!r}")
        shifts = self.shifts()
        if len(shifts) != self.n_labels or not all(np.isfinite(s) and s >= 0 for s in shifts):
            raise ConfigError("query_shift must be one value >= 0 or one per label")
        if self.n_query_captions < 1 or self.group_size < 1:
            raise ConfigError("n_query_captions and group_size must be >= 1")
        if self.label_names is not None and len(self.label_names) != self.n_labels:
            raise ConfigError("label_names must have one entry per label")
        if self.label_directions is None:
            if self.dim < self.n_labels:
                raise ConfigError(f"dim={self.dim} < n_labels={self.n_labels}: "
                                  "orthonormal label directions impossible")
        elif np.shape(self.label_directions) != (self.n_labels, self.dim):
            raise ConfigError("label_directions must be n_labels x dim")
        if any(s > 0 for s in shifts) and self.dim <= self.n_labels:
            raise ConfigError("a query shift needs dim > n_labels")

    def shifts(self) -> list[float]:
        if np.ndim(self.query_shift) == 0:
            return [float(self.query_shift)] * self.n_labels
        return [float(s) for s in self.query_shift]

    def names(self) -> tuple[str, ...]:
        if self.label_names is not None:
            return tuple(self.label_names)
        extra = tuple(f"Label {i}" for i in range(len(DEFAULT_LABELS), self.n_labels))
        return (DEFAULT_LABELS + extra)[:self.n_labels]

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("query_shift", "label_names", "label_directions"):
            if d[key] is not None and np.ndim(d[key]) > 0:
                d[key] = np.asarray(d[key]).tolist()
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid spec JSON: {exc.msg}") from exc
        if not isinstance(d, dict):
            raise ConfigError("spec must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class SynthDataset:
    captions: EmbeddingMatrix
    images: EmbeddingMatrix
    labels: LabelTable
    query_captions: dict[str, EmbeddingMatrix]
    spec: SynthSpec
    label_directions: np.ndarray = field(repr=False)
    shift_direction: np.ndarray | None = field(repr=False, default=None)


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.sqrt(row_sq_norms(v))[:, None]


def _fdot(a: np.ndarray, b: np.ndarray) -> float:
    return math.fsum(a * b)


def _gram_schmidt(vectors: np.ndarray, basis: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Orthonormalise rows against ``basis`` and each other (two passes each)."""
    out = list(basis or [])
    for v in vectors:
        v = np.array(v, dtype=np.float64)
        for _ in range(2):
            for e in out:
                v = v - _fdot(v, e) * e
        norm = math.sqrt(_fdot(v, v))
        if norm < 1e-8:
            raise ConfigError("label directions are linearly dependent")
        out.append(v / norm)
    return out


def _geometry(spec: SynthSpec, gen) -> tuple[np.ndarray, np.ndarray | None]:
    L, d = spec.n_labels, spec.dim
    if spec.label_directions is None:
        k = L + 1 if d > L else L
        basis = _gram_schmidt(gen.standard_normal((k, d)))
        return np.array(basis[:L]), (basis[L] if k > L else None)
    dirs = _normalize(np.asarray(spec.label_directions, dtype=np.float64))
    if d <= L:
        return dirs, None
    basis = _gram_schmidt(dirs)
    return dirs, _gram_schmidt(gen.standard_normal((1, d)), basis)[-1]


def generate(spec: SynthSpec) -> SynthDataset:
    geo_gen, label_gen, noise_gen, query_gen = (stream(spec.seed, i) for i in range(4))
    dirs, shift = _geometry(spec, geo_gen)
    n, L, d = spec.n_pairs, spec.n_labels, spec.dim

    primary = np.minimum((label_gen.random(n) * L).astype(np.int64), L - 1)
    active = label_gen.random((n, L)) < spec.mix_prob
    active[np.arange(n), primary] = True

    z = np.zeros((n, d))
    for j in range(L):
        z = z + active[:, j, None] * dirs[j][None, :]
    if spec.latent_noise > 0:
        z = z + spec.latent_noise * noise_gen.standard_normal((n, d))
    z = _normalize(z)
    captions = _normalize(z + spec.sigma_txt * noise_gen.standard_normal((n, d)))
    images = _normalize(z + spec.sigma_img * noise_gen.standard_normal((n, d)))

    names = spec.names()
    table = LabelTable(
        tuple(f"s{i}" for i in range(n)), names,
        np.where(active, POSITIVE, NEGATIVE),
        tuple(f"g{i // spec.group_size}" for i in range(n)) if spec.group_size > 1 else None)

    queries = {}
    m = spec.n_query_captions
    for j, (name, delta) in enumerate(zip(names, spec.shifts())):
        base = np.repeat(dirs[j][None, :], m, axis=0)
        if spec.latent_noise > 0:
            base = _normalize(base + spec.latent_noise * query_gen.standard_normal((m, d)))
        noise = query_gen.standard_normal((m, d))
        if delta > 0:
            base = base + delta * shift[None, :]
        queries[name] = EmbeddingMatrix(_normalize(base + spec.sigma_txt * noise), "query_captions")

    return SynthDataset(EmbeddingMatrix(captions, "captions"), EmbeddingMatrix(images, "images"),
                        table, queries, spec, dirs, shift)


def _largest_remainder(total: int, proportions: Sequence[float]) -> list[int]:
    quotas = [Fraction(repr(float(p))) * total for p in proportions]
    sizes = [int(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:total - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(data, proportions=None, seed: int = 0, groups=None) -> dict[str, np.ndarray]:
    """Seeded disjoint, exhaustive partition of rows into named splits.

    ``data`` is a row count, a LabelTable or a SynthDataset. Rows sharing a
    group id (the label table's ``groups`` unless given) always land in the
    same split; sizes are then apportioned over groups.
    """
    props = dict(DEFAULT_SPLIT if proportions is None else proportions)
    if isinstance(data, SynthDataset):
        data = data.labels
    if isinstance(data, LabelTable):
        n = len(data)
        if groups is None:
            groups = data.groups
    else:
        n = int(data)
    vals = list(props.values())
    if not vals or any(not p > 0 for p in vals) or abs(sum(vals) - 1.0) > 1e-9:
        raise ConfigError(f"split proportions must be positive and sum to 1, got {props}")
    if groups is None:
        unit_of_row = np.arange(n)
        n_units = n
    else:
        if len(groups) != n:
            raise ConfigError("groups must align with rows")
        first_seen: dict = {}
        unit_of_row = np.array([first_seen.setdefault(g, len(first_seen)) for g in groups],
                               dtype=np.int64)
        n_units = len(first_seen)
    order = permutation(stream(seed, 0), n_units)
    sizes = _largest_remainder(n_units, vals)
    out = {}
    start = 0
    for name, size in zip(props, sizes):
        units = np.zeros(n_units, dtype=bool)
        units[order[start:start + size]] = True
        out[name] = np.flatnonzero(units[unit_of_row])
        start += size
    return out


def write_dataset(ds: SynthDataset, out_dir, splits: dict[str, np.ndarray] | None = None) -> list[str]:
    """Write the dataset (and optional per-split files) in the io formats; returns file names."""
    out = Path(out_dir)
    (out / "query_captions").mkdir(parents=True, exist_ok=True)
    written = []

    def npy(m, name):
        store_npy(m, out / name)
        written.append(name)

    npy(ds.captions, "captions.npy")
    npy(ds.images, "images.npy")
    store_labels(ds.labels, out / "labels.jsonl")
    written.append("labels.jsonl")
    index = []
    for name, m in ds.query_captions.items():
        fname = f"query_captions/{slug(name)}.npy"
        npy(m, fname)
        index.append({"label": name, "file": Path(fname).name, "n_captions": m.rows})
    (out / "query_captions" / "index.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in index), encoding="utf-8")
    written.append("query_captions/index.jsonl")
    (out / "spec.json").write_text(ds.spec.to_json(), encoding="utf-8")
    written.append("spec.json")
    if splits is not None:
        (out / "splits.json").write_text(
            json.dumps({k: v.tolist() for k, v in splits.items()}) + "\n", encoding="utf-8")
        written.append("splits.json")
        for name, idx in splits.items():
            if idx.size == 0:
                continue
            npy(ds.captions.take(idx), f"{name}_captions.npy")
            npy(ds.images.take(idx), f"{name}_images.npy")
            store_labels(ds.labels.take(idx), out / f"{name}_labels.jsonl")
            written.append(f"{name}_labels.jsonl")
    return written


def slug(name: str) -> str:
    return "".join(c.lower() if c.isalnum() else "_" for c in name).strip("_") or "label"
