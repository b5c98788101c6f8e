import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathcal.config import RunConfig, config_hash, load_config, parse_config, snapshot
from pathcal.data import KINDS, gen_data, load_csv, load_jsonl, save_csv, shifted_blobs


def _linear_probe_accuracy(X, y, n_classes):
    """Least-squares one-vs-rest probe with a bias column."""
    A = np.c_[X.reshape(len(X), -1), np.ones(len(X))]
    W, *_ = np.linalg.lstsq(A, np.eye(n_classes)[y], rcond=None)
    return float(np.mean((A @ W).argmax(1) == y))


@pytest.mark.parametrize("layout", ["tabular", "grid"])
def test_blobs_are_linearly_separable(layout):
    ds = gen_data("blobs", 600, seed=0, layout=layout)
    assert _linear_probe_accuracy(ds.features, ds.labels, 3) >= 0.95


@pytest.mark.parametrize("kind", KINDS)
def test_same_seed_same_data(kind):
    a, b = gen_data(kind, 50, seed=3), gen_data(kind, 50, seed=3)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.features, gen_data(kind, 50, seed=4).features)


@pytest.mark.parametrize("kind", KINDS)
def test_minimum_size(kind):
    ds = gen_data(kind, 10, seed=0)
    assert len(ds) == 10
    assert set(ds.labels.tolist()) <= set(range(ds.n_classes))
    with pytest.raises(ValueError):
        gen_data(kind, 9)


def test_splits_partition_the_records():
    ds = gen_data("moons", 101, seed=1)
    idx = np.concatenate([ds.splits[k] for k in ("train", "val", "test")])
    assert sorted(idx.tolist()) == list(range(101))
    assert len(ds.splits["train"]) == 61
    with pytest.raises(KeyError):
        ds.split("holdout")


def test_token_parity_labels():
    ds = gen_data("token-parity", 40, seed=0)
    assert ds.layout == "tokens" and ds.features.shape == (40, 16)
    np.testing.assert_array_equal(ds.labels, ds.features.sum(1) % 2)


def test_unknown_kind():
    with pytest.raises(ValueError):
        gen_data("swiss-roll", 20)


def test_shifted_blobs_sit_between_the_training_blobs():
    ood = shifted_blobs(200, layout="tabular")
    assert np.linalg.norm(ood.mean(0)) < 0.2
    assert shifted_blobs(10).shape == (10, 8, 8)


def test_csv_roundtrip(tmp_path):
    ds = gen_data("blobs", 30, seed=2)
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv", seed=2, image_size=8)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.layout == "grid" and back.n_classes == 3


def test_csv_bad_header(tmp_path):
    (tmp_path / "bad.csv").write_text("x,y,label\n1,2,0\n")
    with pytest.raises(ValueError):
        load_csv(tmp_path / "bad.csv")


def test_jsonl(tmp_path):
    rows = [{"features": [0.5, -1.0], "label": 1}, {"features": [2.0, 0.0], "label": 0}]
    (tmp_path / "d.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    ds = load_jsonl(tmp_path / "d.jsonl")
    assert ds.features.shape == (2, 2) and ds.labels.tolist() == [1, 0] and ds.n_classes == 2


# -- config -----------------------------------------------------------------------------
def test_snapshot_roundtrip():
    cfg = RunConfig(seed=3, backbone_mode="standard", distill_lambda_mean=0.7,
                    distill_lambda_cholesky=0.0, distill_lambda_nll=0.3, kernel_residual=False)
    assert parse_config(snapshot(cfg)) == cfg
    assert config_hash(parse_config(snapshot(cfg))) == config_hash(cfg)


def test_parse_grammar(tmp_path):
    text = "# comment\n\nbackbone.mode = sgpa   # trailing\nseed = 4\ndistill.lambda_mean = auto\n"
    (tmp_path / "c.cfg").write_text(text)
    cfg = load_config(tmp_path / "c.cfg")
    assert cfg.backbone_mode == "sgpa" and cfg.seed == 4 and cfg.distill_lambda_mean is None
    with pytest.raises(ValueError):
        parse_config("backbone.colour = red")
    with pytest.raises(ValueError):
        parse_config("just some words")
    with pytest.raises(ValueError):
        parse_config("kernel.residual = maybe")
    with pytest.raises(ValueError):
        parse_config("distill.lambda_mean = 0.5")


def test_hash_tracks_every_field():
    assert config_hash(RunConfig()) != config_hash(RunConfig(eval_bins=10))
    assert config_hash(RunConfig()) == config_hash(RunConfig())


def test_derived_configs():
    cfg = RunConfig(backbone_mode="kep", backbone_depth=3, data_kind="moons")
    assert cfg.backbone_config().n_classes == 2
    assert cfg.kernel_config().T == 3 and cfg.kernel_config().n_tokens == 16
    assert cfg.distill_config().weights is None
    full = RunConfig(distill_lambda_mean=1.0, distill_lambda_cholesky=0.0, distill_lambda_nll=0.0)
    assert full.distill_config().weights.as_tuple() == (1.0, 0.0, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-6, 1.0), st.sampled_from(["standard", "kep", "sgpa"]))
def test_snapshot_roundtrip_property(seed, lr, mode):
    cfg = RunConfig(seed=seed, distill_learning_rate=lr, backbone_mode=mode)
    assert parse_config(snapshot(cfg)) == cfg
