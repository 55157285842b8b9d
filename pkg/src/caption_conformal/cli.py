"""Command-line entry point.

Exit codes: 0 success, 2 usage or validation error, 1 internal error.
Diagnostics go to stderr; data goes to files (or stdout for ``report``).
Every command writes a manifest JSON next to its outputs holding the inputs
(with SHA-256), the resolved parameters and package versions. ``--threads``
is deliberately left out of manifests because it never changes output bytes.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._kernels import set_threads
from .conformal import Mode, check_alpha, decide, p_value
from .errors import ConfigError, ConformalError, ShapeError, UndefinedAuroc
from .harness import SimulationSpec, render_report, run_coverage_sim
from .io import (CalibrationModel, ScoreKind, ScoreSeries, format_float, load_calibration,
                 load_labels, load_npy, load_scores, store_calibration, store_npy,
                 store_scores)
from .knn import DEFAULT_K, KnnConfig, knnd
from .metrics import DEFAULT_BLOCK_ROWS, pairwise_s_i
from .synth import SynthSpec, generate, slug, split, write_dataset
from .zeroshot import (Stratification, build_label_query, roc_auc, stratify,
                       zeroshot_scores)

log = logging.getLogger("caption_conformal")

DEFAULTS = {
    "calibrate": {"k": DEFAULT_K, "block_rows": DEFAULT_BLOCK_ROWS},
    "admit": {},
    "knnd": {"k": DEFAULT_K, "block_rows": DEFAULT_BLOCK_ROWS},
    "zeroshot": {"exclude_unknown": False},
    "eval-coverage": {"alphas": "0.001,0.01,0.05,0.1", "sims": 100, "subsample": 5000,
                      "seed": 0, "stratification": "mixed", "model_tag": "model"},
    "synth": {},
    "report": {"format": "md"},
}
REQUIRED = {
    "calibrate": ("captions", "score", "out"),
    "admit": ("calib", "scores", "alpha", "mode", "out"),
    "knnd": ("queries", "train", "out"),
    "zeroshot": ("images", "labels", "label_queries", "out_dir"),
    "eval-coverage": ("calib", "pos", "neg", "out_dir"),
    "synth": ("spec", "out_dir"),
    "report": ("input",),
}


class UsageError(ConformalError):
    pass


# ------------------------------------------------------------------ helpers

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path: Path, command: str, args, inputs: dict, outputs: list[str]) -> None:
    params = {k: v for k, v in sorted(vars(args).items())
              if k not in ("threads", "config", "command", "func") and v is not None}
    doc = {
        "command": command,
        "versions": {"caption_conformal": __version__, "numpy": np.__version__},
        "parameters": params,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)}
                   for name, p in sorted(inputs.items()) if p is not None},
        "outputs": outputs,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _manifest_for(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


def _named_paths(items, kind_hint: str) -> list[tuple[str, str]]:
    """Parse ``NAME=path`` items; bare paths take the name from the sidecar or stem."""
    out = []
    for item in items:
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            path = item
            name = None
            meta = Path(path).with_suffix(".meta.json")
            if kind_hint == "scores" and meta.exists():
                name = (json.loads(meta.read_text()).get("params") or {}).get("label")
            name = name or Path(path).stem.split(".")[0]
        out.append((name, path))
    return out


def _parse_alphas(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(a) for a in text]
    try:
        return [float(a) for a in str(text).split(",") if a.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse alphas {text!r}") from exc


# ----------------------------------------------------------------- commands

def cmd_calibrate(args) -> None:
    captions = load_npy(args.captions, "captions")
    out = Path(args.out)
    if args.score == "si":
        if not args.images:
            raise UsageError("--score si needs --images")
        series = pairwise_s_i(captions, load_npy(args.images, "images"), "rowwise")
        info = {"score": "si", "captions": args.captions, "images": args.images}
        inputs = {"captions": args.captions, "images": args.images}
    elif args.score == "st":
        if not args.train:
            raise UsageError("--score st needs --train")
        cfg = KnnConfig(int(args.k), int(args.block_rows))
        series = knnd(captions, load_npy(args.train, "captions"), cfg).series
        info = {"score": "st", "k": int(args.k), "captions": args.captions, "train": args.train}
        inputs = {"captions": args.captions, "train": args.train}
    else:
        raise UsageError(f"--score must be si or st, got {args.score!r}")
    model = CalibrationModel.from_series(series, info)
    out.parent.mkdir(parents=True, exist_ok=True)
    store_calibration(model, out)
    _write_manifest(_manifest_for(out), "calibrate", args, inputs, [out.name])


def cmd_admit(args) -> None:
    calib = load_calibration(args.calib)
    series = load_scores(args.scores)
    mode = Mode(str(args.mode).replace("-", "_"))
    alpha = float(args.alpha)
    check_alpha(alpha)
    lines = ["index,score,p_value,required_coverage,admitted"]
    for i, s in enumerate(series.values):
        d = decide(calib, s, alpha, mode)
        pv = p_value(calib, s)
        lines.append(f"{i},{format_float(s)},{format_float(pv.p_value)},"
                     f"{format_float(pv.required_coverage)},{'true' if d.admitted else 'false'}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(_manifest_for(out), "admit", args,
                    {"calib": args.calib, "scores": args.scores}, [out.name])


def cmd_knnd(args) -> None:
    queries = load_npy(args.queries, "captions")
    train = load_npy(args.train, "captions")
    res = knnd(queries, train, KnnConfig(int(args.k), int(args.block_rows)))
    series = ScoreSeries(ScoreKind.KNN_TEXT, res.mean_distance,
                         {"k": int(args.k), "queries": args.queries, "train": args.train})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    store_scores(series, out)
    _write_manifest(_manifest_for(out), "knnd", args,
                    {"queries": args.queries, "train": args.train},
                    [out.name, out.with_suffix(".meta.json").name])


def _label_query_sources(items) -> list[tuple[str, str]]:
    if len(items) == 1 and items[0].endswith(".jsonl") and "=" not in items[0]:
        index = Path(items[0])
        out = []
        for line in index.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                out.append((rec["label"], str(index.parent / rec["file"])))
        return out
    return _named_paths(items, "npy")


def cmd_zeroshot(args) -> None:
    images = load_npy(args.images, "images")
    labels = load_labels(args.labels)
    if len(labels) != images.rows:
        raise ShapeError(f"{len(labels)} label rows but {images.rows} images")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = _label_query_sources(args.label_queries)
    queries, inputs = [], {"images": args.images, "labels": args.labels}
    for name, path in sources:
        if name not in labels.labels:
            log.warning("label %r not in the label table, skipped", name)
            continue
        queries.append(build_label_query(load_npy(path, "query_captions"), name))
        inputs[f"queries:{name}"] = path
    if not queries:
        raise UsageError("no label queries match the label table")
    outputs = ["label_queries.npy", "label_queries.jsonl"]
    store_npy(np.stack([q.query_embedding for q in queries]), out_dir / "label_queries.npy")
    (out_dir / "label_queries.jsonl").write_text("".join(
        json.dumps({"label": q.label, "row": i, "n_captions": len(q.caption_ids)}) + "\n"
        for i, q in enumerate(queries)), encoding="utf-8")
    sims = zeroshot_scores(images, queries)
    summary = ["label,stratification,auroc,n_pos,n_neg"]
    evaluated = 0
    for mode in (Stratification.PURE, Stratification.MIXED):
        strata = stratify(labels, mode, exclude_unknown=bool(args.exclude_unknown))
        (out_dir / mode.value).mkdir(exist_ok=True)
        for j, q in enumerate(queries):
            st = strata[q.label]
            if len(st.positives) == 0 or len(st.negatives) == 0:
                log.warning("%s/%s: %d positives, %d negatives; skipped", mode.value, q.label,
                            len(st.positives), len(st.negatives))
                continue
            col = sims[:, j]
            try:
                roc = roc_auc(np.r_[col[st.positives], col[st.negatives]],
                              np.r_[np.ones(len(st.positives), bool),
                                    np.zeros(len(st.negatives), bool)])
            except UndefinedAuroc as exc:
                log.warning("%s/%s: %s; skipped", mode.value, q.label, exc)
                continue
            evaluated += 1
            base = f"{mode.value}/{slug(q.label)}"
            (out_dir / f"{base}.roc.csv").write_text("threshold,fpr,tpr\n" + "".join(
                f"{format_float(t)},{format_float(f)},{format_float(p)}\n"
                for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr)), encoding="utf-8")
            distances = 1.0 - col
            for role, idx in (("pos", st.positives), ("neg", st.negatives)):
                store_scores(ScoreSeries(ScoreKind.IMAGE_CAPTION, distances[idx],
                                         {"label": q.label, "stratification": mode.value,
                                          "role": role}), out_dir / f"{base}.{role}.csv")
                outputs += [f"{base}.{role}.csv", f"{base}.{role}.meta.json"]
            outputs.append(f"{base}.roc.csv")
            summary.append(f"{_q(q.label)},{mode.value},{format_float(roc.auroc)},"
                           f"{len(st.positives)},{len(st.negatives)}")
    if evaluated == 0:
        raise UsageError("no label has both positives and negatives")
    (out_dir / "auroc_summary.csv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    outputs.append("auroc_summary.csv")
    _write_manifest(out_dir / "manifest.json", "zeroshot", args, inputs, outputs)


def _q(s: str) -> str:
    return f'"{s}"' if "," in s or '"' in s else s


def cmd_eval_coverage(args) -> None:
    calib = load_calibration(args.calib)
    pos = {name: load_scores(p) for name, p in _named_paths(args.pos, "scores")}
    neg = {name: load_scores(p) for name, p in _named_paths(args.neg, "scores")}
    if set(pos) != set(neg):
        raise ConfigError(f"--pos labels {sorted(pos)} differ from --neg labels {sorted(neg)}")
    spec = SimulationSpec(alphas=_parse_alphas(args.alphas), n_sims=int(args.sims),
                          subsample=int(args.subsample), seed=int(args.seed),
                          stratification=args.stratification)
    report = run_coverage_sim(calib, pos, neg, spec, model_tag=args.model_tag)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "coverage.csv").write_text(render_report(report, "csv"), encoding="utf-8")
    (out_dir / "coverage.md").write_text(render_report(report, "markdown"), encoding="utf-8")
    inputs = {"calib": args.calib}
    inputs.update({f"pos:{n}": p for n, p in _named_paths(args.pos, "scores")})
    inputs.update({f"neg:{n}": p for n, p in _named_paths(args.neg, "scores")})
    _write_manifest(out_dir / "manifest.json", "eval-coverage", args, inputs,
                    ["coverage.csv", "coverage.md"])


def cmd_synth(args) -> None:
    try:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.spec}: spec must be a JSON object")
    proportions = doc.pop("split", None)
    spec = SynthSpec.from_json(json.dumps(doc))
    ds = generate(spec)
    parts = split(ds, proportions, seed=spec.seed)
    written = write_dataset(ds, args.out_dir, parts)
    _write_manifest(Path(args.out_dir) / "manifest.json", "synth", args,
                    {"spec": args.spec}, written)


def cmd_report(args) -> None:
    root = Path(args.input)
    manifests = sorted(p for p in root.rglob("*manifest.json") if p.is_file())
    if not manifests:
        raise UsageError(f"no manifests found under {root}")
    fmt = args.format
    if fmt not in ("md", "markdown", "csv"):
        raise UsageError(f"--format must be md or csv, got {fmt!r}")
    text = _report_csv(root, manifests) if fmt == "csv" else _report_md(root, manifests)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _result_tables(root: Path, manifest: Path) -> list[Path]:
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    names = ("coverage.csv", "auroc_summary.csv")
    return [manifest.parent / o for o in doc.get("outputs", []) if o in names
            and (manifest.parent / o).exists()]


def _report_md(root: Path, manifests: list[Path]) -> str:
    parts = ["# Run report", ""]
    for m in manifests:
        doc = json.loads(m.read_text(encoding="utf-8"))
        parts += [f"## {doc.get('command', '?')} ({m.relative_to(root).as_posix()})", ""]
        for key, value in doc.get("parameters", {}).items():
            parts.append(f"- {key}: {json.dumps(value)}")
        parts.append("")
        for table in _result_tables(root, m):
            if table.name == "coverage.csv" and (table.parent / "coverage.md").exists():
                parts += [(table.parent / "coverage.md").read_text(encoding="utf-8"), ""]
                continue
            rows = [r.split(",") for r in table.read_text(encoding="utf-8").splitlines()]
            parts.append("| " + " | ".join(rows[0]) + " |")
            parts.append("|" + "---|" * len(rows[0]))
            parts += ["| " + " | ".join(r) + " |" for r in rows[1:]]
            parts.append("")
    return "\n".join(parts).rstrip("\n") + "\n"


def _report_csv(root: Path, manifests: list[Path]) -> str:
    lines = ["source,kind,key,value"]
    for m in manifests:
        src = _q(m.relative_to(root).as_posix())
        doc = json.loads(m.read_text(encoding="utf-8"))
        lines.append(f"{src},command,command,{doc.get('command', '')}")
        for key, value in doc.get("parameters", {}).items():
            lines.append(f"{src},parameter,{key},{_q(json.dumps(value))}")
        for table in _result_tables(root, m):
            rows = table.read_text(encoding="utf-8").splitlines()
            for i, r in enumerate(rows[1:], start=1):
                lines.append(f"{_q(table.relative_to(root).as_posix())},row,{i},{_q(r)}")
    return "\n".join(lines) + "\n"


COMMANDS = {
    "calibrate": cmd_calibrate, "admit": cmd_admit, "knnd": cmd_knnd,
    "zeroshot": cmd_zeroshot, "eval-coverage": cmd_eval_coverage,
    "synth": cmd_synth, "report": cmd_report,
}


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caption-conformal",
                                description="Conformal outlier detection for zero-shot captions.")
    p.add_argument("--threads", type=int, default=None,
                   help="kernel threads (default: all cores); never changes outputs")
    p.add_argument("--config", default=None, help="JSON file whose keys mirror the flags")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="build a calibration model")
    c.add_argument("--captions")
    c.add_argument("--images")
    c.add_argument("--score", choices=("si", "st"))
    c.add_argument("--train")
    c.add_argument("--k", type=int)
    c.add_argument("--block-rows", type=int)
    c.add_argument("--out")

    c = sub.add_parser("admit", help="admit/outlier decisions for a score file")
    c.add_argument("--calib")
    c.add_argument("--scores")
    c.add_argument("--alpha", type=float)
    c.add_argument("--mode", choices=("tpr-control", "outlier-test"))
    c.add_argument("--out")

    c = sub.add_parser("knnd", help="mean k-NN cosine distance to training captions")
    c.add_argument("--queries")
    c.add_argument("--train")
    c.add_argument("--k", type=int)
    c.add_argument("--block-rows", type=int)
    c.add_argument("--out")

    c = sub.add_parser("zeroshot", help="zero-shot ROC/AUROC per label")
    c.add_argument("--images")
    c.add_argument("--labels")
    c.add_argument("--label-queries", nargs="+",
                   help="NAME=captions.npy items, or one query-caption index.jsonl")
    c.add_argument("--exclude-unknown", action="store_const", const=True)
    c.add_argument("--out-dir")

    c = sub.add_parser("eval-coverage", help="simulated TPR/FPR table")
    c.add_argument("--calib")
    c.add_argument("--pos", nargs="+", help="NAME=scores.csv items")
    c.add_argument("--neg", nargs="+", help="NAME=scores.csv items")
    c.add_argument("--alphas")
    c.add_argument("--sims", type=int)
    c.add_argument("--subsample", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--stratification", choices=("pure", "mixed"))
    c.add_argument("--model-tag")
    c.add_argument("--out-dir")

    c = sub.add_parser("synth", help="write a synthetic dataset")
    c.add_argument("--spec")
    c.add_argument("--out-dir")

    c = sub.add_parser("report", help="aggregate manifests and result tables")
    c.add_argument("--in", dest="input")
    c.add_argument("--format", choices=("md", "csv"))
    c.add_argument("--out")
    return p


def _resolve(args) -> None:
    """Fill unset flags from --config, then defaults; flags always win."""
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(config, dict):
            raise UsageError("config must be a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
        if config.get("in") is not None:
            config.setdefault("input", config.pop("in"))
    for key, value in config.items():
        if key == "threads" and args.threads is None:
            args.threads = value
        elif hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    for key, value in DEFAULTS[args.command].items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) in (None, [])]
    if missing:
        flags = ", ".join("--" + ("in" if k == "input" else k.replace("_", "-")) for k in missing)
        raise UsageError(f"{args.command}: missing required {flags}")


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s: %(message)s", level=logging.WARNING,
                        stream=sys.stderr)
    logging.captureWarnings(True)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _resolve(args)
        set_threads(args.threads)
        COMMANDS[args.command](args)
    except (ConformalError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
