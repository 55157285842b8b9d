import json

import numpy as np
import pytest
from scipy import stats

from caption_conformal.errors import ConfigError
from caption_conformal.io import load_labels, load_npy
from caption_conformal.knn import KnnConfig, knnd
from caption_conformal.metrics import pairwise_s_i
from caption_conformal.synth import SynthSpec, generate, slug, split, write_dataset


def test_noiseless_pairs_coincide():
    ds = generate(SynthSpec(dim=8, n_pairs=200, sigma_img=0, sigma_txt=0))
    assert np.array_equal(ds.captions.values, ds.images.values)
    assert np.all(pairwise_s_i(ds.captions, ds.images).values == 0.0)


def test_geometry_and_shapes():
    spec = SynthSpec(dim=12, n_pairs=300, n_labels=4, mix_prob=0.3, query_shift=[0, 1, 2, 3],
                     n_query_captions=7)
    ds = generate(spec)
    basis = np.vstack([ds.label_directions, ds.shift_direction])
    assert np.allclose(basis @ basis.T, np.eye(5), atol=1e-12)
    assert ds.captions.values.shape == (300, 12) and ds.labels.assignments.shape == (300, 4)
    assert (ds.labels.assignments == 1).sum(axis=1).min() == 1
    assert all(m.rows == 7 for m in ds.query_captions.values())
    norms = np.linalg.norm(ds.images.values.astype(np.float64), axis=1)
    assert np.allclose(norms, 1, atol=1e-6)


def test_deterministic():
    a = generate(SynthSpec(seed=5, latent_noise=0.1, mix_prob=0.2))
    b = generate(SynthSpec(seed=5, latent_noise=0.1, mix_prob=0.2))
    assert a.captions.values.tobytes() == b.captions.values.tobytes()
    assert a.images.values.tobytes() == b.images.values.tobytes()
    c = generate(SynthSpec(seed=6))
    assert a.captions.values.tobytes() != c.captions.values.tobytes()


@pytest.mark.parametrize("kwargs", [
    {"dim": 3, "n_labels": 4},
    {"dim": 4, "n_labels": 4, "query_shift": 1.0},
    {"sigma_img": -1},
    {"mix_prob": 1.5},
    {"query_shift": [1, 2]},
])
def test_invalid_specs(kwargs):
    with pytest.raises(ConfigError):
        SynthSpec(**kwargs)


def test_spec_json_round_trip():
    spec = SynthSpec(query_shift=[0, 1, 2, 3], label_names=["a", "b", "c", "d"])
    assert SynthSpec.from_json(spec.to_json()) == spec
    with pytest.raises(ConfigError):
        SynthSpec.from_json('{"dimension": 3}')


def _label0_st(seed, delta):
    spec = SynthSpec(dim=16, n_pairs=2000, sigma_img=0.25, sigma_txt=0.25, query_shift=delta,
                     n_query_captions=200, seed=seed)
    ds = generate(spec)
    train = ds.captions.take(np.arange(1500))
    held = np.arange(1500, 2000)
    held = held[ds.labels.assignments[held, 0] == 1]
    cfg = KnnConfig(k=20)
    q = knnd(ds.query_captions[spec.names()[0]], train, cfg).mean_distance
    ref = knnd(ds.captions.take(held), train, cfg).mean_distance
    return q, ref


def test_unshifted_queries_exchangeable():
    # family-wise 0.1% over the 50 seeds, plus uniformity of the p-values themselves
    pvals = [stats.ks_2samp(*_label0_st(seed, 0.0)).pvalue for seed in range(50)]
    assert min(pvals) > 0.001 / 50
    assert stats.kstest(pvals, "uniform").pvalue > 0.001


def test_large_shift_dominates():
    q, _ = _label0_st(0, 10 * 0.25 * 4.0)  # ten noise-vector norms (sigma * sqrt(d))
    spec = SynthSpec(dim=16, n_pairs=2000, sigma_img=0.25, sigma_txt=0.25, seed=0)
    ds = generate(spec)
    calib = knnd(ds.captions.take(np.arange(1500, 2000)), ds.captions.take(np.arange(1500)),
                 KnnConfig(k=20)).mean_distance
    assert q.min() > np.quantile(calib, 0.99)


def test_query_distance_grows_with_shift():
    means = [np.mean([_label0_st(seed, d)[0].mean() for seed in range(20)])
             for d in (0.0, 0.5, 1.0, 2.0, 5.0)]
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_split_sizes_and_partition():
    parts = split(10, {"train": 0.5, "val": 0.1, "calib": 0.2, "test": 0.2}, seed=1)
    assert [len(v) for v in parts.values()] == [5, 1, 2, 2]
    assert sorted(np.concatenate(list(parts.values())).tolist()) == list(range(10))
    again = split(10, {"train": 0.5, "val": 0.1, "calib": 0.2, "test": 0.2}, seed=1)
    assert all(np.array_equal(parts[k], again[k]) for k in parts)


def test_split_largest_remainder_default():
    sizes = [len(v) for v in split(1001).values()]
    assert sum(sizes) == 1001 and sizes == [721, 80, 100, 100]


def test_split_keeps_groups_together():
    ds = generate(SynthSpec(n_pairs=301, group_size=3))
    parts = split(ds, seed=4)
    where = {}
    for name, idx in parts.items():
        for i in idx:
            where.setdefault(ds.labels.groups[i], set()).add(name)
    assert all(len(v) == 1 for v in where.values())
    assert sum(len(v) for v in parts.values()) == 301


@pytest.mark.parametrize("props", [{"a": 0.5, "b": 0.6}, {"a": 1.0, "b": 0.0}, {}])
def test_split_bad_proportions(props):
    with pytest.raises(ConfigError):
        split(10, props)


def test_write_dataset(tmp_path):
    spec = SynthSpec(dim=6, n_pairs=50, query_shift=1.0, n_query_captions=3)
    ds = generate(spec)
    parts = split(ds)
    write_dataset(ds, tmp_path, parts)
    assert np.array_equal(load_npy(tmp_path / "captions.npy").values, ds.captions.values)
    assert load_labels(tmp_path / "test_labels.jsonl").row_ids == tuple(
        ds.labels.row_ids[i] for i in parts["test"])
    index = [json.loads(l) for l in (tmp_path / "query_captions/index.jsonl").read_text().splitlines()]
    for row in index:
        m = load_npy(tmp_path / "query_captions" / row["file"])
        assert np.array_equal(m.values, ds.query_captions[row["label"]].values)
    assert SynthSpec.from_json((tmp_path / "spec.json").read_text()) == spec
    assert slug("Pleural Effusion") == "pleural_effusion"
