"""Shared data types and on-disk formats.

Formats handled here:

* NPY v1.0 embedding matrices (``<f4`` written, ``<f4``/``<f8`` read)
* JSONL label tables, one ``{"id": ..., "labels": {...}}`` object per line
* score series as ``index,score`` CSV plus a ``.meta.json`` sidecar
* calibration models as JSON

Floats are always written with the shortest decimal string that round-trips
(Python's ``repr``), so golden files are deterministic.
"""
from __future__ import annotations

import ast
import csv
import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (ConfigError, DegenerateRow, DuplicateId, FormatError,
                     IoError, UnsupportedLayout)
from ._kernels import DEGENERATE_NORM, row_sq_norms

NPY_MAGIC = b"\x93NUMPY"
NPY_ALIGN = 64

DEFAULT_LABELS = ("Cardiomegaly", "Edema", "Consolidation", "Pleural Effusion")

POSITIVE, NEGATIVE, UNKNOWN = 1, 0, -1


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Dense n x d matrix of row embeddings, stored as float32.

    Rows must be finite with L2 norm >= 1e-12; construction raises
    :class:`DegenerateRow` otherwise.
    """

    values: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise UnsupportedLayout(f"expected a 2-D matrix, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise FormatError(f"matrix must have n >= 1 and d >= 1, got shape {v.shape}")
        # float64 input is narrowed with round-to-nearest
        v = _readonly(np.array(v, dtype=np.float32, order="C", copy=True))
        check_rows(v)
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.rows

    def take(self, indices, source_tag=None) -> "EmbeddingMatrix":
        tag = self.source_tag if source_tag is None else source_tag
        return EmbeddingMatrix(self.values[np.asarray(indices, dtype=np.int64)], tag)


def check_rows(values: np.ndarray) -> None:
    """Raise DegenerateRow for the first non-finite or near-zero row."""
    finite = np.isfinite(values).all(axis=1)
    if not finite.all():
        raise DegenerateRow(int(np.argmin(finite)), "non-finite entry")
    norms = np.sqrt(row_sq_norms(values))
    small = norms < DEGENERATE_NORM
    if small.any():
        raise DegenerateRow(int(np.argmax(small)))


# --------------------------------------------------------------------- NPY

def _npy_header(shape: tuple[int, ...]) -> bytes:
    d = {"descr": "<f4", "fortran_order": False, "shape": tuple(shape)}
    text = "{" + "".join(f"'{key}': {d[key]!r}, " for key in sorted(d)) + "}"
    preamble = len(NPY_MAGIC) + 2 + 2
    pad = -(preamble + len(text) + 1) % NPY_ALIGN
    text = text + " " * pad + "\n"
    return NPY_MAGIC + b"\x01\x00" + struct.pack("<H", len(text)) + text.encode("latin1")


def store_npy(m: EmbeddingMatrix | np.ndarray, path) -> None:
    values = m.values if isinstance(m, EmbeddingMatrix) else np.asarray(m, dtype=np.float32)
    values = np.ascontiguousarray(values, dtype="<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(_npy_header(values.shape))
            fh.write(values.tobytes(order="C"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_npy(path, source_tag: str = "") -> EmbeddingMatrix:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 10 or raw[:6] != NPY_MAGIC:
        raise FormatError(f"{path}: missing NPY magic")
    if raw[6:8] != b"\x01\x00":
        raise UnsupportedLayout(f"{path}: NPY version {raw[6]}.{raw[7]} (only 1.0 supported)")
    (hlen,) = struct.unpack("<H", raw[8:10])
    if len(raw) < 10 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = ast.literal_eval(raw[10:10 + hlen].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise FormatError(f"{path}: unparsable header") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{path}: header must hold exactly descr, fortran_order, shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise FormatError(f"{path}: bad shape {shape!r}")
    if descr not in ("<f4", "<f8"):
        raise UnsupportedLayout(f"{path}: dtype {descr!r} (need little-endian float32/float64)")
    if fortran is not False:
        raise UnsupportedLayout(f"{path}: fortran_order arrays are not supported")
    if len(shape) != 2:
        raise UnsupportedLayout(f"{path}: expected 2-D array, got shape {shape}")
    if shape[0] < 1 or shape[1] < 1:
        raise FormatError(f"{path}: empty matrix {shape}")
    dtype = np.dtype(descr)
    payload = raw[10 + hlen:]
    if len(payload) != shape[0] * shape[1] * dtype.itemsize:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header implies "
                          f"{shape[0] * shape[1] * dtype.itemsize}")
    values = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return EmbeddingMatrix(values.astype(np.float32), source_tag)


# ------------------------------------------------------------------ labels

@dataclass(frozen=True, eq=False)
class LabelTable:
    """Per-row multi-label assignments: 1 positive, 0 negative, -1 unknown."""

    row_ids: tuple
    labels: tuple[str, ...]
    assignments: np.ndarray
    groups: tuple | None = None

    def __post_init__(self):
        a = _readonly(np.array(self.assignments, dtype=np.int8, copy=True).reshape(
            len(self.row_ids), len(self.labels)))
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError(f"label names must be unique: {self.labels}")
        if not np.isin(a, (POSITIVE, NEGATIVE, UNKNOWN)).all():
            raise ConfigError("assignments must be 1, 0 or -1")
        if self.groups is not None and len(self.groups) != len(self.row_ids):
            raise ConfigError("groups must align with row_ids")
        object.__setattr__(self, "row_ids", tuple(self.row_ids))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "assignments", a)

    def __len__(self):
        return len(self.row_ids)

    def column(self, label: str) -> np.ndarray:
        return self.assignments[:, self.labels.index(label)]

    def take(self, indices) -> "LabelTable":
        idx = [int(i) for i in indices]
        groups = None if self.groups is None else tuple(self.groups[i] for i in idx)
        return LabelTable(tuple(self.row_ids[i] for i in idx), self.labels,
                          self.assignments[idx], groups)


_JSON_TO_STATE = {True: POSITIVE, False: NEGATIVE, None: UNKNOWN}
_STATE_TO_JSON = {POSITIVE: True, NEGATIVE: False, UNKNOWN: None}


def load_labels(path) -> LabelTable:
    ids, rows, groups = [], [], []
    names: list[str] = []
    seen = set()
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed JSON: {exc.msg}", line=lineno) from exc
        if not isinstance(obj, dict) or "id" not in obj or not isinstance(obj.get("labels"), dict):
            raise FormatError('expected {"id": ..., "labels": {...}}', line=lineno)
        rid = obj["id"]
        if isinstance(rid, bool) or not isinstance(rid, (str, int)):
            raise FormatError(f"id must be a string or integer, got {rid!r}", line=lineno)
        key = (type(rid).__name__, rid)
        if key in seen:
            raise DuplicateId(rid, line=lineno)
        seen.add(key)
        row = {}
        for name, value in obj["labels"].items():
            if not (value is None or isinstance(value, bool)):
                raise FormatError(f"label {name!r} must be true, false or null", line=lineno)
            if name not in names:
                names.append(name)
            row[name] = _JSON_TO_STATE[value]
        ids.append(rid)
        rows.append(row)
        groups.append(obj.get("group"))
    assignments = np.full((len(ids), len(names)), UNKNOWN, dtype=np.int8)
    for i, row in enumerate(rows):
        for name, state in row.items():
            assignments[i, names.index(name)] = state
    has_groups = any(g is not None for g in groups)
    return LabelTable(tuple(ids), tuple(names), assignments,
                      tuple(groups) if has_groups else None)


def store_labels(table: LabelTable, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, rid in enumerate(table.row_ids):
                obj: dict[str, Any] = {"id": rid, "labels": {
                    name: _STATE_TO_JSON[int(table.assignments[i, j])]
                    for j, name in enumerate(table.labels)}}
                if table.groups is not None:
                    obj["group"] = table.groups[i]
                fh.write(json.dumps(obj) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ------------------------------------------------------------------ scores

class ScoreKind(str, enum.Enum):
    IMAGE_CAPTION = "image_caption"   # cosine distance of a caption/image pair
    KNN_TEXT = "knn_text"             # mean k-NN cosine distance to training captions


@dataclass(frozen=True, eq=False)
class ScoreSeries:
    kind: ScoreKind
    values: np.ndarray
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        kind = ScoreKind(self.kind)
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        bad = ~np.isfinite(v) | (v < 0.0) | (v > 2.0)
        if bad.any():
            i = int(np.argmax(bad))
            raise FormatError(f"score {i} = {v[i]!r} outside [0, 2]")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", _readonly(v))
        object.__setattr__(self, "params", dict(self.params))

    def __len__(self):
        return len(self.values)

    @staticmethod
    def concat(series: Sequence["ScoreSeries"]) -> "ScoreSeries":
        kinds = {s.kind for s in series}
        if len(kinds) != 1:
            raise ConfigError(f"cannot mix score kinds {sorted(k.value for k in kinds)}")
        return ScoreSeries(series[0].kind, np.concatenate([s.values for s in series]),
                           series[0].params)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".meta.json")


def format_float(x: float) -> str:
    return repr(float(x))


def store_scores(series: ScoreSeries, path) -> None:
    path = Path(path)
    lines = ["index,score"] + [f"{i},{format_float(v)}" for i, v in enumerate(series.values)]
    meta = {"kind": series.kind.value, "params": dict(series.params)}
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_scores(path) -> ScoreSeries:
    path = Path(path)
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise FormatError(f"{path}: missing sidecar {meta_path.name}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        kind = ScoreKind(meta["kind"])
    except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{meta_path}: invalid sidecar ({exc})") from exc
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0] != ["index", "score"]:
        raise FormatError(f"{path}: header must be 'index,score'", line=1)
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise FormatError("expected two columns", line=lineno)
        try:
            idx, val = int(row[0]), float(row[1])
        except ValueError as exc:
            raise FormatError(f"unparsable row {row!r}", line=lineno) from exc
        if idx != len(values):
            raise FormatError(f"index {idx} out of sequence", line=lineno)
        if not math.isfinite(val) or val < 0.0 or val > 2.0:
            raise FormatError(f"score {row[1]!r} must be finite and in [0, 2]", line=lineno)
        values.append(val)
    return ScoreSeries(kind, np.array(values, dtype=np.float64), meta.get("params") or {})


# ------------------------------------------------------- calibration model

@dataclass(frozen=True, eq=False)
class CalibrationModel:
    """Sorted calibration scores; the source of thresholds and p-values."""

    kind: ScoreKind
    sorted_scores: np.ndarray
    created_with: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.sorted_scores, dtype=np.float64, copy=True).reshape(-1)
        if v.size < 1:
            raise ConfigError("calibration needs at least one score")
        if np.any(np.diff(v) < 0):
            raise FormatError("calibration scores must be sorted ascending")
        ScoreSeries(self.kind, v)  # range validation
        object.__setattr__(self, "kind", ScoreKind(self.kind))
        object.__setattr__(self, "sorted_scores", _readonly(v))
        object.__setattr__(self, "created_with", dict(self.created_with))

    @property
    def n(self) -> int:
        return int(self.sorted_scores.size)

    @classmethod
    def from_series(cls, series: ScoreSeries, created_with=None) -> "CalibrationModel":
        info = dict(series.params)
        info.update(created_with or {})
        return cls(series.kind, np.sort(series.values, kind="stable"), info)

    @classmethod
    def from_scores(cls, scores: Iterable[float], kind=ScoreKind.IMAGE_CAPTION,
                    created_with=None) -> "CalibrationModel":
        return cls(kind, np.sort(np.asarray(list(scores), dtype=np.float64)), created_with or {})

    def to_json(self) -> str:
        doc = {"kind": self.kind.value, "n": self.n,
               "scores": [float(s) for s in self.sorted_scores],
               "created_with": self.created_with}
        return json.dumps(doc, indent=1) + "\n"


def store_calibration(model: CalibrationModel, path) -> None:
    try:
        Path(path).write_text(model.to_json(), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_calibration(path) -> CalibrationModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})", line=exc.lineno) from exc
    try:
        model = CalibrationModel(ScoreKind(doc["kind"]), doc["scores"], doc.get("created_with") or {})
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise FormatError(f"{path}: invalid calibration model ({exc})") from exc
    if doc.get("n") != model.n:
        raise FormatError(f"{path}: n={doc.get('n')} but {model.n} scores")
    return model
