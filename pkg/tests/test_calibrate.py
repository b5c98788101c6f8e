import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathcal import calibrate as cal
from pathcal.backbone import BackboneConfig, init_backbone, backbone_forward
from pathcal import tensor as tn
from pathcal.errors import ContractError
from pathcal.kernelnet import KernelConfig, init_kernel
from pathcal.pathify import path_logits, repartition
from pathcal.rng import make_rng
from pathcal.verify import (failure_split, oracle_aupr, oracle_auroc, oracle_aurc, oracle_brier,
                            oracle_ece, oracle_fpr95, oracle_mcc, oracle_nll, random_prediction_set)

PS = cal.PredictionSet


def _binary(p_true_class, labels):
    p = np.asarray(p_true_class, dtype=float)
    labels = np.asarray(labels)
    probs = np.where(labels[:, None] == np.arange(2), p[:, None], (1 - p)[:, None])
    return PS(probs, labels)


# -- worked examples -------------------------------------------------------------------------
def test_ece_examples():
    assert cal.ece(PS(np.eye(3), [0, 1, 2])) == 0.0
    assert cal.ece(PS([[0.0, 1.0]], [0])) == 1.0
    probs = np.tile([0.8, 0.2], (10, 1))
    assert cal.ece(PS(probs, [0] * 5 + [1] * 5)) == pytest.approx(0.3, abs=1e-12)


def test_nll_brier_examples():
    perfect = PS(np.eye(2), [0, 1])
    assert cal.nll(perfect) == 0.0 and cal.brier(perfect) == 0.0
    assert cal.brier(PS([[0.5, 0.5]], [1])) == 0.5
    assert cal.nll(PS([[0.8, 0.2]], [0])) == pytest.approx(-math.log(0.8), abs=1e-15)
    assert cal.nll(PS([[1.0, 0.0]], [1])) == pytest.approx(-math.log(1e-12))


def test_mcc_examples():
    assert cal.mcc(PS(np.eye(2)[[0, 1, 1, 0]], [0, 1, 1, 0])) == 1.0
    assert cal.mcc(PS(np.eye(2)[[1, 1, 1]], [0, 1, 0])) == 0.0
    # TP=3, TN=2, FP=1, FN=1
    pred = [1, 1, 1, 0, 0, 1, 0]
    true = [1, 1, 1, 0, 0, 0, 1]
    assert cal.mcc(PS(np.eye(2)[pred], true)) == pytest.approx(5 / 12, abs=1e-15)
    with pytest.raises(ContractError):
        cal.mcc(PS(np.eye(3), [0, 1, 2]))


def test_selective_examples():
    ranked = PS([[0.9, 0.1], [0.8, 0.2], [0.6, 0.4], [0.55, 0.45]], [0, 0, 1, 1])
    assert cal.failure_auroc(ranked) == 1.0
    two = PS([[0.9, 0.1], [0.6, 0.4]], [0, 1])
    assert cal.aurc(two) == pytest.approx(0.25, abs=1e-15)
    ties = PS(np.tile([0.7, 0.3], (4, 1)), [0, 0, 1, 1])
    assert cal.failure_auroc(ties) == 0.5
    with pytest.raises(ContractError):
        cal.failure_auroc(PS(np.eye(2), [0, 1]))


def test_ood_examples():
    hi, lo = np.array([0.9, 0.8, 0.95]), np.array([0.1, 0.3])
    assert cal.auroc(hi, lo) == 1.0 and cal.aupr(hi, lo) == 1.0
    same = np.array([0.2, 0.5, 0.7])
    assert cal.auroc(same, same) == 0.5
    pos, neg = np.array([0.9, 0.4]), np.array([0.6, 0.4])
    assert cal.auroc(pos, neg) == pytest.approx(oracle_auroc(pos, neg), abs=1e-15)
    assert cal.aupr(pos, neg) == pytest.approx(oracle_aupr(pos, neg), abs=1e-15)
    assert cal.fpr_at_tpr(pos, neg) == pytest.approx(oracle_fpr95(pos, neg), abs=1e-15)


def test_ood_scores():
    probs = np.array([[1.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]])
    np.testing.assert_allclose(cal.ood_scores(probs, "msp"), [1.0, 1 / 3])
    np.testing.assert_allclose(cal.ood_scores(probs, "entropy"), [0.0, -math.log(3)], atol=1e-15)
    with pytest.raises(ValueError):
        cal.ood_scores(probs, "energy")


def test_invalid_prediction_sets():
    with pytest.raises(ContractError):
        PS([[0.5, 0.6]], [0])
    with pytest.raises(ContractError):
        PS([[0.5, 0.5]], [2])
    with pytest.raises(ContractError):
        cal.ece(PS(np.zeros((0, 2)), []))


# -- oracle equivalence ---------------------------------------------------------------------------
def test_metric_oracles_on_random_sets():
    rng = make_rng(5, "calibrate-oracles")
    for _ in range(200):
        probs, labels = random_prediction_set(rng)
        ps, P, Y = PS(probs, labels), probs.tolist(), labels.tolist()
        assert abs(cal.ece(ps) - oracle_ece(P, Y)) <= 1e-12
        assert abs(cal.nll(ps) - oracle_nll(P, Y)) <= 1e-12
        assert abs(cal.brier(ps) - oracle_brier(P, Y)) <= 1e-12
        assert abs(cal.aurc(ps) - oracle_aurc(P, Y)) <= 1e-12
        if probs.shape[1] == 2:
            assert abs(cal.mcc(ps) - oracle_mcc(P, Y)) <= 1e-12
        pos, neg = failure_split(P, Y)
        if pos and neg:
            assert abs(cal.failure_auroc(ps) - oracle_auroc(pos, neg)) <= 1e-12
            assert abs(cal.fpr95(ps) - oracle_fpr95(pos, neg)) <= 1e-12


def test_perfectly_calibrated_set():
    rng = make_rng(0, "perfect-calibration")
    n = 100_000
    c = rng.uniform(0.5, 1.0, n)
    correct = rng.random(n) < c
    labels = np.where(correct, 0, 1)
    assert cal.ece(_binary(np.where(correct, c, 1 - c), labels)) < 0.01


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_ranges(seed):
    probs, labels = random_prediction_set(make_rng(seed, "ranges"), max_n=30)
    ps = PS(probs, labels)
    assert 0 <= cal.ece(ps) <= 1 and 0 <= cal.brier(ps) <= 2 and cal.nll(ps) >= 0
    assert 0 <= cal.aurc(ps) <= 1
    s = cal.ood_scores(probs, "msp")
    assert 0 <= cal.auroc(s, s[::-1] * 0.5) <= 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_ranking_metrics_invariant_to_monotone_maps(seed):
    rng = make_rng(seed, "monotone")
    pos, neg = rng.random(int(rng.integers(1, 8))), rng.random(int(rng.integers(1, 8)))
    f = lambda x: np.exp(3 * x) - 7.0
    assert cal.auroc(f(pos), f(neg)) == pytest.approx(cal.auroc(pos, neg), abs=1e-15)
    assert cal.aupr(f(pos), f(neg)) == pytest.approx(cal.aupr(pos, neg), abs=1e-15)
    assert cal.fpr_at_tpr(f(pos), f(neg)) == pytest.approx(cal.fpr_at_tpr(pos, neg), abs=1e-15)


def test_reliability_bins_cover_all_samples():
    probs, labels = random_prediction_set(make_rng(1, "rb"), max_n=12)
    bins = cal.reliability_bins(PS(probs, labels))
    assert len(bins) == 15 and sum(b["count"] for b in bins) == len(labels)


# -- prediction ----------------------------------------------------------------------------------
def _images(n):
    return make_rng(0, "cal-imgs").uniform(0, 1, (n, 8, 8))


def test_deterministic_sources_use_one_draw():
    model = init_backbone(BackboneConfig(depth=2), 0)
    X, y = _images(5), np.zeros(5, dtype=int)
    with tn.no_grad():
        logits = backbone_forward(model, X)[0].data
    ref = np.exp(logits - logits.max(1, keepdims=True))
    ref /= ref.sum(1, keepdims=True)
    np.testing.assert_allclose(cal.predict_calibrated(model, X, y, n_draws=10).probs, ref, atol=1e-14)
    path = repartition(model)
    np.testing.assert_allclose(cal.predict_calibrated(path, X, y).probs, ref, atol=1e-12)


def test_floor_kernel_single_draw_equals_path():
    model = init_backbone(BackboneConfig(depth=2), 0)
    path = repartition(model)
    kp = init_kernel(KernelConfig(T=2), 0)
    kp["scale_b"].data[...] = -800.0
    X, y = _images(4), np.zeros(4, dtype=int)
    one = cal.predict_calibrated((path, kp), X, y, n_draws=1).probs
    ten = cal.predict_calibrated((path, kp), X, y, n_draws=10).probs
    np.testing.assert_allclose(one, ten, atol=1e-6)   # floor-scale noise


def test_gp_backbone_averages_draws():
    model = init_backbone(BackboneConfig(depth=2, mode="kep"), 0)
    X, y = _images(4), np.zeros(4, dtype=int)
    a = cal.predict_calibrated(model, X, y, n_draws=3, seed=1)
    b = cal.predict_calibrated(model, X, y, n_draws=3, seed=1)
    np.testing.assert_array_equal(a.probs, b.probs)
    with pytest.raises(ContractError):
        cal.predict_calibrated(model, X, y, n_draws=0)


# -- reports and files ----------------------------------------------------------------------------
def test_report_rendering():
    ps = PS([[0.9, 0.1], [0.3, 0.7], [0.6, 0.4], [0.2, 0.8]], [0, 1, 1, 1])
    rep = cal.calibration_report(ps)
    r = rep.rendered()
    assert r["ACC"] == pytest.approx(75.0) and r["ECE"] == pytest.approx(100 * rep.ece)
    assert r["NLLx10"] == pytest.approx(10 * rep.nll)
    assert rep.mcc is not None and rep.to_dict()["n"] == 4


def test_prediction_csv_roundtrip(tmp_path):
    probs, labels = random_prediction_set(make_rng(2, "csv"))
    cal.dump_predictions(PS(probs, labels), tmp_path / "p.csv")
    back = cal.load_predictions(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.labels, labels)
    np.testing.assert_allclose(back.probs, probs, rtol=1e-15)


def test_plot_is_deterministic(tmp_path):
    rep = cal.calibration_report(PS([[0.9, 0.1], [0.3, 0.7], [0.6, 0.4]], [0, 1, 1]))
    cal.plot_report(rep, tmp_path / "a.svg")
    cal.plot_report(rep, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
