"""Independent oracles and the self-check suite behind ``pathcal verify``.

The metric oracles here are deliberately naive loops written from the metric
definitions, sharing no code with :mod:`pathcal.calibrate`.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .rng import make_rng


# -- metric oracles ---------------------------------------------------------------
def oracle_ece(probs, labels, n_bins=15):
    n = len(labels)
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = []
        for i in range(n):
            c = max(probs[i])
            in_bin = (lo < c <= hi) or (b == 0 and c <= lo)
            if in_bin:
                members.append(i)
        if members:
            conf = sum(max(probs[i]) for i in members) / len(members)
            acc = sum(1.0 for i in members if int(np.argmax(probs[i])) == labels[i]) / len(members)
            total += len(members) / n * abs(acc - conf)
    return total


def oracle_nll(probs, labels, floor=1e-12):
    return sum(-math.log(max(probs[i][labels[i]], floor)) for i in range(len(labels))) / len(labels)


def oracle_brier(probs, labels):
    total = 0.0
    for i in range(len(labels)):
        for c in range(len(probs[i])):
            total += (probs[i][c] - (1.0 if c == labels[i] else 0.0)) ** 2
    return total / len(labels)


def oracle_mcc(probs, labels):
    tp = tn_ = fp = fn = 0
    for i in range(len(labels)):
        pred = int(np.argmax(probs[i]))
        if pred == 1 and labels[i] == 1:
            tp += 1
        elif pred == 0 and labels[i] == 0:
            tn_ += 1
        elif pred == 1:
            fp += 1
        else:
            fn += 1
    denom = (tp + fp) * (tp + fn) * (tn_ + fp) * (tn_ + fn)
    return 0.0 if denom == 0 else (tp * tn_ - fp * fn) / math.sqrt(denom)


def _conf_correct(probs, labels):
    conf = [max(p) for p in probs]
    correct = [int(np.argmax(p)) == y for p, y in zip(probs, labels)]
    return conf, correct


def oracle_aurc(probs, labels):
    conf, correct = _conf_correct(probs, labels)
    order = sorted(range(len(conf)), key=lambda i: -conf[i])      # stable
    risks = []
    for k in range(1, len(order) + 1):
        risks.append(sum(0 if correct[i] else 1 for i in order[:k]) / k)
    return sum(risks) / len(risks)


def oracle_auroc(pos, neg):
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else (0.5 if a == b else 0.0)
    return wins / (len(pos) * len(neg))


def oracle_fpr95(pos, neg, target=0.95):
    best = None
    for thr in sorted(set(list(pos) + list(neg))):
        tpr = sum(1 for a in pos if a >= thr) / len(pos)
        fpr = sum(1 for b in neg if b >= thr) / len(neg)
        if tpr >= target and (best is None or fpr < best):
            best = fpr
    return best


def oracle_aupr(pos, neg):
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(list(pos) + list(neg)), reverse=True):
        tp = sum(1 for a in pos if a >= thr)
        fp = sum(1 for b in neg if b >= thr)
        recall = tp / len(pos)
        ap += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return ap


def failure_split(probs, labels):
    conf, correct = _conf_correct(probs, labels)
    return ([c for c, k in zip(conf, correct) if k], [c for c, k in zip(conf, correct) if not k])


def random_prediction_set(rng: np.random.Generator, max_n: int = 12, max_classes: int = 3):
    """Small random prediction set; half the time drawn from a coarse palette to force ties."""
    n = int(rng.integers(2, max_n + 1))
    C = int(rng.integers(2, max_classes + 1))
    if rng.random() < 0.5:
        palette = rng.dirichlet(np.ones(C), size=3)
        probs = palette[rng.integers(0, 3, size=n)]
    else:
        probs = rng.dirichlet(np.ones(C), size=n)
    labels = rng.integers(0, C, size=n)
    return probs, labels


# -- Gaussian oracles -------------------------------------------------------------------
def kl_monte_carlo(p_mean, p_diag, q_mean, q_scale, n: int, rng) -> tuple[float, float]:
    """``E_p[log p - log q]`` for diagonal Gaussians, with its standard error."""
    x = p_mean + p_diag * rng.standard_normal((n, len(p_mean)))
    lp = -0.5 * np.sum(((x - p_mean) / p_diag) ** 2 + 2 * np.log(p_diag), axis=1)
    lq = -0.5 * np.sum(((x - q_mean) / q_scale) ** 2 + 2 * np.log(q_scale), axis=1)
    d = lp - lq
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(n))


def random_chain(seed: int, T: int = 3, d: int = 4):
    """Nonlinear Gaussian chain ``p`` and a diagonal approximation ``q`` of it.

    ``p_t(x) = N(tanh(A_t x) + b_t, L_t(x) L_t(x)^T)`` with a state-dependent
    lower-triangular factor; ``q_t`` perturbs the mean and uses its own scale.
    """
    from .distill import dense_step

    r = make_rng(seed, "random-chain")
    A = r.normal(0.0, 0.6, (T + 1, d, d))
    b = r.normal(0.0, 0.5, (T + 1, d))
    base = np.tril(r.normal(0.0, 0.3, (T + 1, d, d)), -1) \
        + np.stack([np.diag(r.uniform(0.3, 0.8, d)) for _ in range(T + 1)])
    C = r.normal(0.0, 0.3, (T + 1, d, d))
    q_scale = r.uniform(0.3, 0.9, (T + 1, d))

    def p_step(t, X):
        mean = np.tanh(X @ A[t].T) + b[t]
        gain = 1.0 + 0.3 * np.tanh(X.sum(axis=1))
        return dense_step(mean, base[t][None] * gain[:, None, None])

    def q_step(t, X):
        mean = np.tanh(X @ A[t].T) + b[t] + 0.3 * np.sin(X @ C[t].T)
        return mean, np.broadcast_to(q_scale[t], mean.shape) * (1.0 + 0.1 * np.cos(X))

    return p_step, q_step, r.normal(size=d)


# -- gradient-check registry --------------------------------------------------------------
def _spd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


GRAD_CASES: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda a, b: (a + b).sum() * (a * b).sum(),
            lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (lambda a, b: ((a - b) ** 2).sum(), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
    "mul": (lambda a, b: (a * b * a).sum(), lambda r: [r.normal(size=(2, 3)), r.normal(size=(3,))]),
    "div": (lambda a, b: (a / b).sum(), lambda r: [r.normal(size=(3,)), r.uniform(0.5, 2.0, (3,))]),
    "pow": (lambda a: (a ** 3).sum(), lambda r: [r.normal(size=(4,))]),
    "exp": (lambda a: tn.exp(a).sum(), lambda r: [r.normal(size=(3, 2))]),
    "log": (lambda a: tn.log(a).sum(), lambda r: [r.uniform(0.5, 3.0, (4,))]),
    "sqrt": (lambda a: tn.sqrt(a).sum(), lambda r: [r.uniform(0.5, 3.0, (4,))]),
    "tanh": (lambda a: (tn.tanh(a) * a).sum(), lambda r: [r.normal(size=(5,))]),
    "softplus": (lambda a: (tn.softplus(a) ** 2).sum(), lambda r: [r.normal(size=(5,))]),
    "gelu": (lambda a: (tn.gelu(a) ** 2).sum(), lambda r: [r.normal(size=(6,))]),
    "sum": (lambda a: (a.sum(axis=1) ** 2).sum(), lambda r: [r.normal(size=(3, 4))]),
    "mean": (lambda a: (a.mean(axis=0) ** 2).sum(), lambda r: [r.normal(size=(3, 4))]),
    "reshape": (lambda a: (a.reshape(6, 2) @ a.reshape(2, 6)).sum(), lambda r: [r.normal(size=(3, 4))]),
    "transpose": (lambda a: (a.transpose(1, 0) * tn.as_tensor(np.arange(12.0).reshape(4, 3))).sum()
                  + (a ** 2).sum(), lambda r: [r.normal(size=(3, 4))]),
    "slice": (lambda a: (a[1:, ::2] ** 2).sum() + (a[np.array([0, 0, 2])] ** 3).sum(),
              lambda r: [r.normal(size=(3, 4))]),
    "concat": (lambda a, b: (tn.concat([a, b], axis=1) ** 2).sum() * tn.concat([a, b], axis=0).sum(),
               lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "stack": (lambda a, b: (tn.stack([a, b * a], axis=0) ** 2).sum(),
              lambda r: [r.normal(size=(3,)), r.normal(size=(3,))]),
    "matmul": (lambda a, b: ((a @ b) ** 2).sum(), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "matmul_batched": (lambda a, b: ((a @ b) ** 2).sum(),
                       lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]),
    "einsum": (lambda a, b, c: (tn.einsum("bij,jk,bk->bi", a, b, c) ** 2).sum(),
               lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=(2, 5))]),
    "inv": (lambda a: (tn.inv(a) ** 2).sum(), lambda r: [_spd(r, 3)]),
    "cholesky": (lambda a: (tn.cholesky(a @ a.T + 3.0 * np.eye(3)) ** 2).sum(),
                 lambda r: [r.normal(size=(3, 3))]),
    "softmax": (lambda a: (tn.softmax(a, axis=-1) * tn.as_tensor(np.arange(8.0).reshape(2, 4))).sum(),
                lambda r: [r.normal(size=(2, 4))]),
    "log_softmax": (lambda a: (tn.log_softmax(a) * tn.as_tensor(np.arange(8.0).reshape(2, 4))).sum(),
                    lambda r: [r.normal(size=(2, 4))]),
    "layer_norm": (lambda a, g, b: (tn.layer_norm(a, g, b) * tn.as_tensor(np.arange(12.0).reshape(3, 4))).sum(),
                   lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,)), r.normal(size=(4,))]),
    "cross_entropy": (lambda a: tn.cross_entropy(a, np.array([0, 2, 1])),
                      lambda r: [r.normal(size=(3, 3))]),
}


def gradcheck_case(name: str, points: int = 10, seed: int = 0) -> float:
    fn, make = GRAD_CASES[name]
    worst = 0.0
    for k in range(points):
        worst = max(worst, tn.gradcheck(fn, make(make_rng(seed, "gradcheck", name, k)),
                                        h=1e-4, rtol=1e-4))
    return worst


# -- suite ---------------------------------------------------------------------------------
@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _metric_checks(n_sets: int, seed: int) -> list[Check]:
    from . import calibrate as cal

    rng = make_rng(seed, "metric-oracles")
    worst = {k: 0.0 for k in ("ece", "nll", "brier", "mcc", "aurc", "failure_auroc", "fpr95",
                              "ood_auroc", "ood_aupr")}
    for _ in range(n_sets):
        probs, labels = random_prediction_set(rng)
        ps = cal.PredictionSet(probs, labels)
        P, Y = probs.tolist(), labels.tolist()
        worst["ece"] = max(worst["ece"], abs(cal.ece(ps) - oracle_ece(P, Y)))
        worst["nll"] = max(worst["nll"], abs(cal.nll(ps) - oracle_nll(P, Y)))
        worst["brier"] = max(worst["brier"], abs(cal.brier(ps) - oracle_brier(P, Y)))
        if probs.shape[1] == 2:
            worst["mcc"] = max(worst["mcc"], abs(cal.mcc(ps) - oracle_mcc(P, Y)))
        worst["aurc"] = max(worst["aurc"], abs(cal.aurc(ps) - oracle_aurc(P, Y)))
        pos, neg = failure_split(P, Y)
        if pos and neg:
            worst["failure_auroc"] = max(worst["failure_auroc"],
                                         abs(cal.failure_auroc(ps) - oracle_auroc(pos, neg)))
            worst["fpr95"] = max(worst["fpr95"], abs(cal.fpr95(ps) - oracle_fpr95(pos, neg)))
        probs2, _ = random_prediction_set(rng, max_classes=probs.shape[1])
        if probs2.shape[1] == probs.shape[1]:
            for method in ("msp", "entropy"):
                s_in = cal.ood_scores(probs, method)
                s_out = cal.ood_scores(probs2, method)
                res = cal.ood_eval(probs, probs2, method)
                worst["ood_auroc"] = max(worst["ood_auroc"],
                                         abs(res.auroc - oracle_auroc(s_in.tolist(), s_out.tolist())))
                worst["ood_aupr"] = max(worst["ood_aupr"],
                                        abs(res.aupr - oracle_aupr(s_in.tolist(), s_out.tolist())))
    return [Check(f"metric oracle: {k}", v <= 1e-12, f"max |diff| {v:.2e} over {n_sets} sets")
            for k, v in worst.items()]


def _kl_checks(n_pairs: int, n_mc: int, seed: int) -> list[Check]:
    from .distill import kl_gaussian, mahalanobis_term

    rng = make_rng(seed, "kl-oracle")
    fails = 0
    worst_z = 0.0
    for _ in range(n_pairs):
        D = int(rng.integers(1, 9))
        pm, qm = rng.normal(size=D), rng.normal(size=D)
        pd, qs = rng.uniform(0.3, 1.5, D), rng.uniform(0.3, 1.5, D)
        mc, se = kl_monte_carlo(pm, pd, qm, qs, n_mc, rng)
        z = abs(kl_gaussian(pm, pd, qm, qs) - mc) / se
        worst_z = max(worst_z, z)
        fails += z > 3.0
    analytic = abs(kl_gaussian([0.0], [1.0], [1.0], [1.0]) - 0.5)
    null_worst = 0.0
    for _ in range(50):
        D = int(rng.integers(1, 9))
        pm, qm, s = rng.normal(size=D), rng.normal(size=D), rng.uniform(0.2, 2.0, D)
        null_worst = max(null_worst, abs(kl_gaussian(pm, s, qm, s) - mahalanobis_term(pm, qm, s)))
    return [Check("KL vs Monte Carlo", fails == 0,
                  f"{n_pairs - fails}/{n_pairs} within 3 SE (worst {worst_z:.2f} SE)"),
            Check("KL analytic N(0,1)||N(1,1)", analytic <= 1e-12, f"|diff| {analytic:.1e}"),
            Check("KL nullification", null_worst <= 1e-10, f"max |diff| {null_worst:.1e} over 50")]


def _vlb_checks(n_chains: int, seed: int) -> list[Check]:
    from .distill import chain_bound

    ok = 0
    worst = -math.inf
    for i in range(n_chains):
        p_step, q_step, x_T = random_chain(seed * 1000 + i)
        est = chain_bound(p_step, q_step, x_T, 3, n_chains=1000, n_inner=2000, seed=i)
        ok += bool(est.holds(3.0))
        worst = max(worst, (est.nll - est.bound) / est.combined_se)
    return [Check("VLB inequality", ok == n_chains,
                  f"{ok}/{n_chains} chains satisfy nll <= bound + 3 SE "
                  f"(max (nll-bound)/SE {worst:.2f})")]


def _fidelity_checks(n_inputs: int, seed: int) -> list[Check]:
    from .backbone import BackboneConfig, MODES, backbone_forward, init_backbone
    from .pathify import path_logits, repartition

    X = make_rng(seed, "fidelity-inputs").uniform(0.0, 1.0, (n_inputs, 8, 8))
    out = []
    for mode in MODES:
        model = init_backbone(BackboneConfig(mode=mode, depth=4, d_model=32), seed)
        with tn.no_grad():
            direct = backbone_forward(model, X, noise=False)[0].data
        diff = float(np.max(np.abs(path_logits(repartition(model), X) - direct)))
        out.append(Check(f"reconfiguration fidelity ({mode})", diff < 1e-10, f"max |diff| {diff:.1e}"))
    return out


def run_checks(quick: bool = False, seed: int = 0, out: Callable[[str], None] = print) -> bool:
    t0 = time.perf_counter()
    checks: list[Check] = []
    for name in GRAD_CASES:
        try:
            err = gradcheck_case(name, points=3 if quick else 10, seed=seed)
            checks.append(Check(f"gradcheck {name}", True, f"worst rel err {err:.1e}"))
        except AssertionError as exc:
            checks.append(Check(f"gradcheck {name}", False, str(exc)))
    checks += _metric_checks(40 if quick else 200, seed)
    checks += _kl_checks(5 if quick else 20, 20_000 if quick else 100_000, seed)
    checks += _vlb_checks(3 if quick else 20, seed)
    checks += _fidelity_checks(8 if quick else 64, seed)
    width = max(len(c.name) for c in checks)
    for c in checks:
        out(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.detail}")
    n_fail = sum(not c.passed for c in checks)
    out(f"{len(checks) - n_fail}/{len(checks)} checks passed in {time.perf_counter() - t0:.1f}s")
    return n_fail == 0
