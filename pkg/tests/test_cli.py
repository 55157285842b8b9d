import json
import logging
import shutil
from pathlib import Path

import numpy as np
import pytest

from caption_conformal import cli
from caption_conformal.cli import main
from caption_conformal.io import (CalibrationModel, EmbeddingMatrix, LabelTable, ScoreSeries,
                                  load_calibration, load_npy, load_scores, store_calibration,
                                  store_labels, store_npy, store_scores)
from caption_conformal.knn import KnnConfig, knnd
from caption_conformal.synth import SynthSpec, generate
from caption_conformal.zeroshot import build_label_query, roc_auc, stratify, zeroshot_scores

FIXTURES = Path(__file__).parent / "fixtures"
SCRIPTS = Path(__file__).parents[1] / "scripts"


@pytest.fixture
def work(tmp_path, monkeypatch):
    for f in FIXTURES.glob("*.npy"):
        shutil.copy(f, tmp_path / f.name)
    monkeypatch.chdir(tmp_path)
    return tmp_path


def _calib(path, scores, kind="knn_text"):
    store_calibration(CalibrationModel.from_scores(scores, kind=kind), path)


def test_calibrate_si_identical_pairs(work):
    store_npy(EmbeddingMatrix([[1, 2], [3, 4], [5, 6]]), "p.npy")
    assert main(["calibrate", "--captions", "p.npy", "--images", "p.npy", "--score", "si",
                 "--out", "m.json"]) == 0
    m = load_calibration("m.json")
    assert m.sorted_scores.tolist() == [0.0, 0.0, 0.0] and m.kind.value == "image_caption"
    assert Path("m.manifest.json").exists()


def test_calibrate_k_too_large(work, capsys):
    code = main(["calibrate", "--captions", "captions.npy", "--train", "train.npy",
                 "--score", "st", "--k", "151", "--out", "m.json"])
    assert code == 2
    assert "k exceeds training rows" in capsys.readouterr().err


@pytest.mark.parametrize("score,extra", [("si", ["--images", "images.npy"]),
                                         ("st", ["--train", "train.npy", "--k", "7"])])
def test_calibrate_golden(work, score, extra):
    assert main(["calibrate", "--captions", "captions.npy", "--score", score, *extra,
                 "--out", "model.json"]) == 0
    assert Path("model.json").read_bytes() == (FIXTURES / f"golden_{score}.json").read_bytes()


def test_calibrate_missing_flags(work, capsys):
    assert main(["calibrate", "--captions", "captions.npy", "--out", "m.json"]) == 2
    assert "--score" in capsys.readouterr().err
    assert main(["calibrate", "--captions", "captions.npy", "--score", "st",
                 "--out", "m.json"]) == 2


def test_admit_outlier_example(work):
    _calib("c.json", [0.1, 0.2, 0.3])
    store_scores(ScoreSeries("knn_text", [0.9, 0.25]), "s.csv")
    assert main(["admit", "--calib", "c.json", "--scores", "s.csv", "--alpha", "0.05",
                 "--mode", "outlier-test", "--out", "a.csv"]) == 0
    lines = Path("a.csv").read_text().splitlines()
    assert lines[0] == "index,score,p_value,required_coverage,admitted"
    assert lines[1] == "0,0.9,0.25,0.75,true"
    assert lines[2] == "1,0.25,0.5,0.5,true"


def test_admit_no_admission(work):
    _calib("c.json", [i / 100 for i in range(1, 101)], "image_caption")
    store_scores(ScoreSeries("image_caption", [0.0, 0.5]), "s.csv")
    assert main(["admit", "--calib", "c.json", "--scores", "s.csv", "--alpha", "0.001",
                 "--mode", "tpr-control", "--out", "a.csv"]) == 0
    rows = Path("a.csv").read_text().splitlines()[1:]
    assert [r.rsplit(",", 1)[1] for r in rows] == ["false", "false"]


def test_admit_empty_scores(work):
    _calib("c.json", [0.1])
    store_scores(ScoreSeries("knn_text", []), "s.csv")
    assert main(["admit", "--calib", "c.json", "--scores", "s.csv", "--alpha", "0.5",
                 "--mode", "outlier-test", "--out", "a.csv"]) == 0
    assert Path("a.csv").read_text() == "index,score,p_value,required_coverage,admitted\n"


def test_admit_bad_alpha(work):
    _calib("c.json", [0.1])
    store_scores(ScoreSeries("knn_text", [0.1]), "s.csv")
    assert main(["admit", "--calib", "c.json", "--scores", "s.csv", "--alpha", "1.5",
                 "--mode", "outlier-test", "--out", "a.csv"]) == 2


def test_knnd_examples(work):
    store_npy(EmbeddingMatrix([[1, 0]]), "q.npy")
    store_npy(EmbeddingMatrix([[1, 0], [0, 1]]), "t.npy")
    assert main(["knnd", "--queries", "q.npy", "--train", "t.npy", "--k", "2", "--out", "s.csv"]) == 0
    s = load_scores("s.csv")
    assert s.values.tolist() == [0.5] and s.kind.value == "knn_text"
    assert main(["knnd", "--queries", "q.npy", "--train", "t.npy", "--k", "3", "--out", "x.csv"]) == 2


def test_knnd_matches_library_and_threads(work):
    for threads in ("1", "4"):
        assert main(["--threads", threads, "knnd", "--queries", "captions.npy", "--train",
                     "train.npy", "--k", "9", "--block-rows", "13", "--out", f"s{threads}.csv"]) == 0
    assert Path("s1.csv").read_bytes() == Path("s4.csv").read_bytes()
    assert Path("s1.manifest.json").read_bytes() != b""
    lib = knnd(load_npy("captions.npy"), load_npy("train.npy"), KnnConfig(k=9)).mean_distance
    assert load_scores("s1.csv").values.tobytes() == lib.tobytes()


def test_config_precedence(work):
    Path("cfg.json").write_text(json.dumps({"k": 3, "queries": "captions.npy",
                                            "train": "train.npy", "out": "cfg.csv"}))
    assert main(["--config", "cfg.json", "knnd"]) == 0
    assert load_scores("cfg.csv").params["k"] == 3
    assert main(["--config", "cfg.json", "knnd", "--k", "5", "--out", "flag.csv"]) == 0
    assert load_scores("flag.csv").params["k"] == 5
    assert not Path("flag.manifest.json").read_text().count('"threads"')


def _zeroshot_fixture():
    images = EmbeddingMatrix([[1, 0.1], [1, -0.1], [0.1, 1], [-0.1, 1]])
    labels = LabelTable(tuple("abcd"), ("Edema", "Solo"), [[1, 1], [1, 1], [0, 1], [0, 1]])
    store_npy(images, "img.npy")
    store_labels(labels, "lab.jsonl")
    store_npy(EmbeddingMatrix([[1, 0], [0.9, 0.1]]), "edema.npy")
    store_npy(EmbeddingMatrix([[0, 1]]), "solo.npy")


def test_zeroshot_perfect_separation_and_skip(work, caplog):
    _zeroshot_fixture()
    with caplog.at_level(logging.WARNING, logger="caption_conformal"):
        assert main(["zeroshot", "--images", "img.npy", "--labels", "lab.jsonl",
                     "--label-queries", "Edema=edema.npy", "Solo=solo.npy",
                     "--out-dir", "zs"]) == 0
    summary = Path("zs/auroc_summary.csv").read_text().splitlines()
    assert "Edema,mixed,1.0,2,2" in summary
    assert not any(line.startswith("Solo") for line in summary)
    assert "Solo" in caplog.text
    pos = load_scores("zs/mixed/edema.pos.csv")
    assert pos.params == {"label": "Edema", "stratification": "mixed", "role": "pos"}


def test_zeroshot_nothing_evaluable(work):
    _zeroshot_fixture()
    assert main(["zeroshot", "--images", "img.npy", "--labels", "lab.jsonl",
                 "--label-queries", "Solo=solo.npy", "--out-dir", "zs"]) == 2


def test_zeroshot_matches_library(work):
    spec = SynthSpec(dim=10, n_pairs=400, n_labels=4, mix_prob=0.3, sigma_img=0.3,
                     sigma_txt=0.3, query_shift=[0, 0.5, 1, 2], seed=4)
    ds = generate(spec)
    store_npy(ds.images, "img.npy")
    store_labels(ds.labels, "lab.jsonl")
    items = []
    for name, m in ds.query_captions.items():
        store_npy(m, f"{name}.npy")
        items.append(f"{name}={name}.npy")
    assert main(["zeroshot", "--images", "img.npy", "--labels", "lab.jsonl",
                 "--label-queries", *items, "--out-dir", "zs"]) == 0
    summary = Path("zs/auroc_summary.csv").read_text().splitlines()[1:]
    queries = [build_label_query(ds.query_captions[n], n) for n in ds.labels.labels]
    sims = zeroshot_scores(ds.images, queries)
    expected = []
    for mode in ("pure", "mixed"):
        strata = stratify(ds.labels, mode)
        for j, q in enumerate(queries):
            st = strata[q.label]
            col = sims[:, j]
            au = roc_auc(np.r_[col[st.positives], col[st.negatives]],
                         np.r_[np.ones(len(st.positives)), np.zeros(len(st.negatives))]).auroc
            expected.append(f"{q.label},{mode},{au!r},{len(st.positives)},{len(st.negatives)}")
    assert summary == expected


def test_eval_coverage_cli(work, rng):
    _calib("c.json", rng.random(400).tolist(), "image_caption")
    store_scores(ScoreSeries("image_caption", rng.random(50), {"label": "A"}), "a_pos.csv")
    store_scores(ScoreSeries("image_caption", rng.random(70)), "a_neg.csv")
    args = ["eval-coverage", "--calib", "c.json", "--pos", "a_pos.csv", "--neg", "A=a_neg.csv",
            "--sims", "20", "--subsample", "200", "--seed", "3", "--model-tag", "toy"]
    assert main(args + ["--out-dir", "one"]) == 0
    assert main(args + ["--out-dir", "two"]) == 0
    assert Path("one/coverage.csv").read_bytes() == Path("two/coverage.csv").read_bytes()
    assert Path("one/coverage.md").read_text().startswith("| Label | Conformal Error Rate | toy TPR |")
    assert main(args[:-6] + ["--sims", "1", "--subsample", "401", "--out-dir", "x"]) == 2


def test_synth_row_counts(work):
    spec = json.loads((SCRIPTS / "demo_spec.json").read_text())
    assert main(["synth", "--spec", str(SCRIPTS / "demo_spec.json"), "--out-dir", "data"]) == 0
    assert load_npy("data/captions.npy").rows == spec["n_pairs"]
    assert load_npy("data/images.npy").dim == spec["dim"]
    sizes = {k: len(v) for k, v in json.loads(Path("data/splits.json").read_text()).items()}
    assert sum(sizes.values()) == spec["n_pairs"]
    Path("bad.json").write_text('{"dim": 2, "n_labels": 4}')
    assert main(["synth", "--spec", "bad.json", "--out-dir", "bad"]) == 2


def test_report_empty_dir(work, capsys):
    Path("empty").mkdir()
    assert main(["report", "--in", "empty"]) == 2
    assert "no manifests found" in capsys.readouterr().err


def test_report_formats(work, capsys, rng):
    Path("runs").mkdir()
    _calib("runs/c.json", rng.random(100).tolist(), "image_caption")
    store_scores(ScoreSeries("image_caption", rng.random(10)), "p.csv")
    assert main(["eval-coverage", "--calib", "runs/c.json", "--pos", "A=p.csv", "--neg", "A=p.csv",
                 "--sims", "2", "--subsample", "50", "--out-dir", "runs/cov"]) == 0
    assert main(["report", "--in", "runs", "--format", "csv"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "source,kind,key,value"
    assert "cov/manifest.json,command,command,eval-coverage" in out
    assert main(["report", "--in", "runs", "--out", "r.md"]) == 0
    assert "| Label | Conformal Error Rate |" in Path("r.md").read_text()


def test_internal_error_exit_code(work, monkeypatch):
    def boom(args):
        raise RuntimeError("unexpected")
    monkeypatch.setitem(cli.COMMANDS, "report", boom)
    assert main(["report", "--in", "."]) == 1


def test_usage_errors_exit_two(work):
    assert main(["no-such-command"]) == 2
    assert main(["knnd", "--queries", "missing.npy", "--train", "train.npy", "--out", "o.csv"]) == 2
