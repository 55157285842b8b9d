"""End-to-end demo: synth -> calibrate -> zeroshot -> knnd -> admit -> eval-coverage -> report.

Every step goes through the CLI with paths relative to the output directory,
so two runs with the same spec produce byte-identical trees.

    python scripts/run_demo.py OUT_DIR [--threads N] [--spec scripts/demo_spec.json]
"""
import argparse
import json
import os
import shutil
import sys
from pathlib import Path

from caption_conformal.cli import main as cli
from caption_conformal.synth import slug

HERE = Path(__file__).resolve().parent
K = 50


def run(argv, threads):
    code = cli((["--threads", str(threads)] if threads else []) + argv)
    if code != 0:
        raise SystemExit(f"step failed with exit {code}: {' '.join(argv)}")


def demo(out_dir, spec=HERE / "demo_spec.json", threads=None):
    out = Path(out_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(spec, out / "spec.json")
    cwd = os.getcwd()
    os.chdir(out)
    try:
        run(["synth", "--spec", "spec.json", "--out-dir", "data"], threads)
        run(["calibrate", "--captions", "data/calib_captions.npy", "--images",
             "data/calib_images.npy", "--score", "si", "--out", "calib_si.json"], threads)
        run(["calibrate", "--captions", "data/calib_captions.npy", "--train",
             "data/train_captions.npy", "--score", "st", "--k", str(K), "--out", "calib_st.json"],
            threads)
        run(["zeroshot", "--images", "data/test_images.npy", "--labels", "data/test_labels.jsonl",
             "--label-queries", "data/query_captions/index.jsonl", "--out-dir", "zeroshot"], threads)
        run(["knnd", "--queries", "zeroshot/label_queries.npy", "--train",
             "data/train_captions.npy", "--k", str(K), "--out", "label_st.csv"], threads)
        run(["admit", "--calib", "calib_st.json", "--scores", "label_st.csv", "--alpha", "0.05",
             "--mode", "outlier-test", "--out", "label_admit.csv"], threads)
        labels = [json.loads(l)["label"] for l in
                  Path("zeroshot/label_queries.jsonl").read_text().splitlines()]
        for strat in ("mixed", "pure"):
            pos, neg = [], []
            for name in labels:
                stem = f"zeroshot/{strat}/{slug(name)}"
                if Path(stem + ".pos.csv").exists():
                    pos.append(f"{name}={stem}.pos.csv")
                    neg.append(f"{name}={stem}.neg.csv")
            run(["eval-coverage", "--calib", "calib_si.json", "--pos", *pos, "--neg", *neg,
                 "--sims", "100", "--subsample", "500", "--seed", "7",
                 "--stratification", strat, "--model-tag", "synthetic",
                 "--out-dir", f"coverage_{strat}"], threads)
        run(["report", "--in", ".", "--format", "md", "--out", "report.md"], threads)
    finally:
        os.chdir(cwd)
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--spec", default=str(HERE / "demo_spec.json"))
    a = ap.parse_args()
    print(demo(a.out_dir, a.spec, a.threads))
    sys.exit(0)
