import math

import numpy as np
import pytest

from pathcal import kernelnet
from pathcal import tensor as tn
from pathcal.backbone import BackboneConfig, backbone_forward, init_backbone
from pathcal.data import gen_data
from pathcal.distill import (DETERMINISTIC_WEIGHTS, GP_WEIGHTS, DistillConfig, LossWeights,
                             backbone_checksum, chain_bound, default_weights, dense_step,
                             distill_train, kl_gaussian, loss_cholesky, loss_mean, loss_perf,
                             mahalanobis_term, vlb_gap)
from pathcal.errors import ContractError, ParameterizationError
from pathcal.kernelnet import KernelConfig, init_kernel, kernel_forward
from pathcal.pathify import GaussianTransition, PathTrace, repartition, simulate_path
from pathcal.rng import make_rng
from pathcal.verify import kl_monte_carlo, random_chain

CFG = KernelConfig(T=2, d_model=8, n_heads=2, n_tokens=4, mlp_ratio=2)


# -- KL ----------------------------------------------------------------------------------
def test_kl_examples():
    assert kl_gaussian([0.3, -1.0], [0.5, 2.0], [0.3, -1.0], [0.5, 2.0]) == pytest.approx(0, abs=1e-15)
    assert abs(kl_gaussian([0.0], [1.0], [1.0], [1.0]) - 0.5) <= 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_kl_matches_monte_carlo(seed):
    rng = make_rng(seed, "kl-test")
    pm, qm = rng.normal(size=3), rng.normal(size=3)
    pd, qs = rng.uniform(0.4, 1.5, 3), rng.uniform(0.4, 1.5, 3)
    mc, se = kl_monte_carlo(pm, pd, qm, qs, 100_000, rng)
    assert abs(kl_gaussian(pm, pd, qm, qs) - mc) <= 3 * se


def test_kl_dense_factor_matches_closed_form(rng):
    D = 4
    L = np.tril(rng.normal(size=(D, D))) + 2 * np.eye(D)
    pm, qm, qs = rng.normal(size=D), rng.normal(size=D), rng.uniform(0.5, 2, D)
    cov, Q = L @ L.T, np.diag(qs ** 2)
    Qi = np.linalg.inv(Q)
    ref = 0.5 * (np.trace(Qi @ cov) + (qm - pm) @ Qi @ (qm - pm) - D
                 + np.linalg.slogdet(Q)[1] - np.linalg.slogdet(cov)[1])
    assert kl_gaussian(pm, L, qm, qs) == pytest.approx(ref, abs=1e-12)


def test_kl_degenerate_cases():
    assert kl_gaussian([0.0, 0.0], np.array([[1.0], [1.0]]), [0.0, 0.0], [1.0, 1.0]) == math.inf
    with pytest.raises(ParameterizationError):
        kl_gaussian([0.0], [1.0], [0.0], [0.0])


def test_nullification_identity(rng):
    for _ in range(50):
        D = int(rng.integers(1, 9))
        pm, qm, s = rng.normal(size=D), rng.normal(size=D), rng.uniform(0.2, 2.0, D)
        assert abs(kl_gaussian(pm, s, qm, s) - mahalanobis_term(pm, qm, s)) <= 1e-10


# -- matching losses on hand-built traces ----------------------------------------------------
def _trace(states, transitions):
    return PathTrace(states, transitions, [None] * len(transitions), 0, False)


def _identity_kernel(cfg=CFG, offset=0.0):
    kp = init_kernel(cfg, 0)
    kp["mean_w"].data[...] = 0.0
    kp["mean_b"].data[...] = offset
    return kp


def test_loss_mean_zero_and_constant_offset():
    X = make_rng(0, "lm").normal(size=(3, 4, 8))
    trace = _trace([X, X, X], [GaussianTransition(2, X), GaussianTransition(1, X)])
    assert loss_mean(trace, _identity_kernel()).item() == 0.0
    c = 0.25
    assert loss_mean(trace, _identity_kernel(offset=c)).item() == pytest.approx(c * c * 4 * 8, rel=1e-12)
    ts = np.array([1, 2, 2])
    assert loss_mean(trace, _identity_kernel(offset=c), ts).item() == pytest.approx(c * c * 32, rel=1e-12)


def test_loss_mean_straight_line():
    rng = make_rng(1, "lm2")
    states = [rng.normal(size=(2, 4, 8)) for _ in range(3)]
    means = [rng.normal(size=(2, 4, 8)) for _ in range(2)]
    trace = _trace(states, [GaussianTransition(2, means[0]), GaussianTransition(1, means[1])])
    kp = init_kernel(CFG, 2)
    kp["ada_w"].data[...] = rng.normal(0, 0.1, kp["ada_w"].shape)
    total = 0.0
    for t, X, M in ((2, states[0], means[0]), (1, states[1], means[1])):
        with tn.no_grad():
            m = kernel_forward(kp, X, t)[0].data
        for b in range(2):
            total += np.sum((m[b] - M[b]) ** 2) / 2
    assert loss_mean(trace, kp).item() == pytest.approx(total / 2, rel=1e-12)
    ts = np.array([1, 2])
    expected = 0.0
    for b, t in enumerate(ts):
        X, M = (states[0], means[0]) if t == 2 else (states[1], means[1])
        with tn.no_grad():
            expected += np.sum((kernel_forward(kp, X[b], t)[0].data - M[b]) ** 2)
    assert loss_mean(trace, kp, ts).item() == pytest.approx(expected / 2, rel=1e-12)


def _diag_transition(t, mean, std):
    """Transition whose factor is diagonal with per-entry ``std`` [B,N,d]."""
    B, N, d = mean.shape
    G = np.zeros((B, 1, d, N, N))
    P = np.zeros((1, d, d))
    for k in range(d):
        P[0, k, k] = 1.0
        G[:, 0, k] = np.einsum("bn,nm->bnm", std[:, :, k], np.eye(N))
    return GaussianTransition(t, mean, G, P)


def test_diag_transition_helper():
    std = make_rng(0, "diag").uniform(0.1, 1, (2, 4, 8))
    np.testing.assert_allclose(_diag_transition(1, np.zeros((2, 4, 8)), std).row_norms(), std)


def test_loss_cholesky_examples():
    X = make_rng(0, "lc").normal(size=(2, 4, 8))
    kp = init_kernel(CFG, 0)
    a = 0.3
    kp["scale_w"].data[...] = 0.0
    kp["scale_b"].data[...] = math.log(math.expm1(a - 1e-6))
    tr = [_diag_transition(t, X, np.full(X.shape, a)) for t in (2, 1)]
    assert loss_cholesky(_trace([X, X, X], tr), kp).item() < 1e-24
    kp["scale_b"].data[...] = -800.0
    tr0 = [_diag_transition(t, X, np.zeros(X.shape)) for t in (2, 1)]
    assert loss_cholesky(_trace([X, X, X], tr0), kp).item() == pytest.approx(1e-12 * 32, rel=1e-9)
    with pytest.raises(ContractError):
        loss_cholesky(_trace([X, X], [GaussianTransition(1, X)]), kp)


def test_loss_cholesky_recomputation():
    rng = make_rng(3, "lc2")
    states = [rng.normal(size=(2, 4, 8)) for _ in range(3)]
    stds = [rng.uniform(0.05, 0.5, (2, 4, 8)) for _ in range(2)]
    trace = _trace(states, [_diag_transition(2, states[1], stds[0]),
                            _diag_transition(1, states[2], stds[1])])
    kp = init_kernel(CFG, 1)
    kp["scale_w"].data[...] = rng.normal(0, 0.3, kp["scale_w"].shape)
    total = 0.0
    for t, X, S in ((2, states[0], stds[0]), (1, states[1], stds[1])):
        with tn.no_grad():
            s = kernel_forward(kp, X, t)[1].data
        for b in range(2):
            for n in range(4):
                for k in range(8):
                    total += (s[b, n, k] - S[b, n, k]) ** 2 / 2
    assert loss_cholesky(trace, kp).item() == pytest.approx(total / 2, rel=1e-12)


def _images(n, seed=0):
    return make_rng(seed, "distill-imgs").uniform(0, 1, (n, 8, 8))


def test_loss_perf_uniform_head():
    path = repartition(init_backbone(BackboneConfig(depth=2), 0))
    path.backbone.head_params["w"].data[...] = 0.0
    kp = init_kernel(KernelConfig(T=2), 0)
    y = np.array([0, 1, 2, 1])
    assert loss_perf(path, kp, _images(4), y).item() == pytest.approx(math.log(3), abs=1e-12)


def test_loss_perf_composition_identity(monkeypatch):
    path = repartition(init_backbone(BackboneConfig(depth=2, mode="standard"), 1))
    X, y = _images(6), np.array([0, 1, 2, 0, 1, 2])
    with tn.no_grad():
        logits = backbone_forward(path.backbone, X)[0]
        ce = tn.cross_entropy(logits, y).item()

    from pathcal.pathify import transition_eval

    def exact_kernel(kp, X_t, t):
        X_t = tn.as_tensor(X_t)
        mean = transition_eval(path, t, X_t.data).mean
        return tn.Tensor(mean), tn.Tensor(np.full(mean.shape, 1e-6))

    monkeypatch.setattr(kernelnet, "kernel_forward", exact_kernel)
    got = loss_perf(path, init_kernel(KernelConfig(T=2), 0), X, y).item()
    assert got == pytest.approx(ce, abs=1e-4)


# -- bound ------------------------------------------------------------------------------------
def test_bound_with_q_equal_p():
    D = 2

    def p_step(t, X):
        return dense_step(np.zeros_like(X), np.broadcast_to(np.eye(D), X.shape + (D,)).copy())

    def q_step(t, X):
        return np.zeros_like(X), np.ones_like(X)

    est = chain_bound(p_step, q_step, np.zeros(D), 1, n_chains=1000, n_inner=2000, seed=0)
    assert est.kl_sum == pytest.approx(0.0, abs=1e-12)
    entropy = 0.5 * D * (1 + math.log(2 * math.pi))
    assert est.bound == pytest.approx(entropy, abs=4 * est.bound_se)
    assert est.holds(3.0)


def test_bound_scalar_kl():
    def p_step(t, X):
        return dense_step(np.zeros_like(X), np.ones(X.shape + (1,)))

    def q_step(t, X):
        return np.ones_like(X), np.ones_like(X)

    est = chain_bound(p_step, q_step, np.zeros(1), 1, n_chains=1000, n_inner=2000, seed=1)
    assert est.kl_sum == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_bound_inequality_on_random_chains(seed):
    p_step, q_step, x_T = random_chain(seed)
    est = chain_bound(p_step, q_step, x_T, 3, seed=seed)
    assert est.entropy_included and est.holds(3.0)


def test_bound_without_density_reports_cross_entropy():
    def p_step(t, X):
        return dense_step(X, np.zeros(X.shape + (1,)))

    def q_step(t, X):
        return X, np.ones_like(X)

    est = chain_bound(p_step, q_step, np.zeros(3), 2, n_chains=50, seed=0)
    assert not est.entropy_included and est.nll is None and est.holds() is None
    assert est.bound == pytest.approx(2 * 1.5 * math.log(2 * math.pi), rel=1e-12)


def test_vlb_gap_on_a_real_path():
    path = repartition(init_backbone(BackboneConfig(depth=2, mode="kep"), 0))
    kp = init_kernel(KernelConfig(T=2), 0)
    est = vlb_gap(path, kp, path.embed(_images(1))[0], mc_samples=1000)
    assert np.isfinite(est.bound) and est.n_chains == 1000
    with pytest.raises(ValueError):
        vlb_gap(path, kp, path.embed(_images(1))[0], mc_samples=10)


# -- training ------------------------------------------------------------------------------------
def test_default_weights():
    assert GP_WEIGHTS.as_tuple() == (0.5, 0.2, 0.3)
    assert DETERMINISTIC_WEIGHTS.as_tuple() == (0.8, 0.0, 0.2)
    for mode, w in (("kep", GP_WEIGHTS), ("sgpa", GP_WEIGHTS), ("standard", DETERMINISTIC_WEIGHTS),
                    ("kernel", DETERMINISTIC_WEIGHTS)):
        assert default_weights(repartition(init_backbone(BackboneConfig(mode=mode, depth=1), 0))) == w
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.5, 0.6)


@pytest.fixture(scope="module")
def small():
    ds = gen_data("blobs", 60, seed=0)
    return ds


def test_zero_epochs_returns_params_unchanged(small):
    path = repartition(init_backbone(BackboneConfig(depth=2, mode="kep"), 0))
    kp = init_kernel(KernelConfig(T=2), 0)
    before = {k: v.copy() for k, v in kp.state_arrays().items()}
    _, report = distill_train(path, kp, small, DistillConfig(epochs=0))
    assert report.epochs == []
    for k, v in kp.state_arrays().items():
        np.testing.assert_array_equal(v, before[k])


def test_distillation_is_deterministic_and_leaves_backbone(small):
    runs = []
    for _ in range(2):
        path = repartition(init_backbone(BackboneConfig(depth=2, mode="kep"), 0))
        digest = backbone_checksum(path)
        kp, report = distill_train(path, init_kernel(KernelConfig(T=2), 0), small,
                                   DistillConfig(epochs=2, batch_size=16))
        assert backbone_checksum(path) == digest == report.backbone_sha256
        runs.append((kp.state_arrays(), report.epochs))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        np.testing.assert_array_equal(runs[0][0][k], runs[1][0][k])
    assert runs[0][1][-1]["loss_mean"] < runs[0][1][0]["loss_mean"]


def test_mean_only_weights_on_deterministic_path(small):
    path = repartition(init_backbone(BackboneConfig(depth=2), 0))
    kp, report = distill_train(path, init_kernel(KernelConfig(T=2), 0), small,
                               DistillConfig(epochs=1, weights=LossWeights(1.0, 0.0, 0.0)))
    assert report.weights == (1.0, 0.0, 0.0)
    with pytest.raises(ContractError):
        distill_train(path, kp, small, DistillConfig(epochs=1, weights=GP_WEIGHTS))
