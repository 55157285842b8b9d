"""Regenerate the golden CLI fixtures in tests/fixtures from the reference paths.

The golden calibration models come from the scalar cosine loop and the
brute-force k-NN search, never from the compiled kernels the CLI uses.
"""
import sys
from pathlib import Path

import numpy as np

from caption_conformal.io import CalibrationModel, EmbeddingMatrix, ScoreKind, store_npy
from caption_conformal.knn import KnnConfig, knnd_bruteforce
from caption_conformal.metrics import cosine_distance


def main(out=Path(__file__).resolve().parents[1] / "tests" / "fixtures"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    g = np.random.default_rng(20231)
    captions = EmbeddingMatrix(g.standard_normal((40, 12)))
    images = EmbeddingMatrix(captions.values + 0.3 * g.standard_normal((40, 12)))
    train = EmbeddingMatrix(g.standard_normal((150, 12)))
    for name, m in (("captions", captions), ("images", images), ("train", train)):
        store_npy(m, out / f"{name}.npy")

    si = [cosine_distance(c, i) for c, i in zip(captions.values, images.values)]
    model = CalibrationModel.from_scores(si, ScoreKind.IMAGE_CAPTION, {
        "score": "si", "captions": "captions.npy", "images": "images.npy"})
    (out / "golden_si.json").write_text(model.to_json(), encoding="utf-8")

    st = knnd_bruteforce(captions, train, KnnConfig(k=7)).mean_distance
    model = CalibrationModel.from_scores(st, ScoreKind.KNN_TEXT, {
        "k": 7, "score": "st", "captions": "captions.npy", "train": "train.npy"})
    (out / "golden_st.json").write_text(model.to_json(), encoding="utf-8")


if __name__ == "__main__":
    main(*sys.argv[1:])
