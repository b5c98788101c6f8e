"""Calibration, failure-prediction and OOD metrics.

All metrics take raw values in their natural range; percent or x10 scaling
is applied only by :meth:`CalibrationReport.rendered`.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import tensor as tn
from .errors import ContractError
from .rng import make_rng

N_BINS = 15
NLL_FLOOR = 1e-12


@dataclass
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2 or len(self.probs) != len(self.labels):
            raise ContractError(f"probs {self.probs.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-9):
            raise ContractError("probability rows must sum to 1")
        if np.any(self.labels < 0) or np.any(self.labels >= self.probs.shape[1]):
            raise ContractError("labels outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels


def _nonempty(preds: PredictionSet, metric: str) -> None:
    if len(preds) == 0:
        raise ContractError(f"{metric}: empty prediction set")


# -- calibration --------------------------------------------------------------
def _bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin ``b`` covers ``(b/n, (b+1)/n]``."""
    edges = np.arange(n_bins + 1) / n_bins
    return np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)


def reliability_bins(preds: PredictionSet, n_bins: int = N_BINS) -> list[dict]:
    _nonempty(preds, "reliability")
    conf, corr = preds.confidence, preds.correct.astype(np.float64)
    idx = _bin_index(conf, n_bins)
    out = []
    for b in range(n_bins):
        mask = idx == b
        cnt = int(mask.sum())
        out.append({"lo": b / n_bins, "hi": (b + 1) / n_bins, "count": cnt,
                    "conf": float(conf[mask].mean()) if cnt else None,
                    "acc": float(corr[mask].mean()) if cnt else None})
    return out


def ece(preds: PredictionSet, n_bins: int = N_BINS) -> float:
    if n_bins < 1:
        raise ContractError("ece: n_bins must be >= 1")
    _nonempty(preds, "ece")
    n = len(preds)
    return float(sum(b["count"] / n * abs(b["acc"] - b["conf"])
                     for b in reliability_bins(preds, n_bins) if b["count"]))


def nll(preds: PredictionSet, floor: float = NLL_FLOOR) -> float:
    _nonempty(preds, "nll")
    p = preds.probs[np.arange(len(preds)), preds.labels]
    return float(-np.mean(np.log(np.maximum(p, floor))))


def brier(preds: PredictionSet) -> float:
    _nonempty(preds, "brier")
    onehot = np.eye(preds.n_classes)[preds.labels]
    return float(np.mean(np.sum((preds.probs - onehot) ** 2, axis=1)))


def accuracy(preds: PredictionSet) -> float:
    _nonempty(preds, "accuracy")
    return float(np.mean(preds.correct))


def mcc(preds: PredictionSet) -> float:
    if preds.n_classes != 2:
        raise ContractError(f"mcc: binary task required, got {preds.n_classes} classes")
    _nonempty(preds, "mcc")
    yhat, y = preds.predictions, preds.labels
    tp = float(np.sum((yhat == 1) & (y == 1)))
    tn_ = float(np.sum((yhat == 0) & (y == 0)))
    fp = float(np.sum((yhat == 1) & (y == 0)))
    fn = float(np.sum((yhat == 0) & (y == 1)))
    denom = (tp + fp) * (tp + fn) * (tn_ + fp) * (tn_ + fn)
    return 0.0 if denom == 0 else (tp * tn_ - fp * fn) / math.sqrt(denom)


# -- selective prediction -------------------------------------------------------
def risk_coverage(preds: PredictionSet) -> tuple[np.ndarray, np.ndarray]:
    """Coverage ``k/n`` and error rate among the ``k`` most confident, ``k = 1..n``."""
    _nonempty(preds, "risk_coverage")
    order = np.argsort(-preds.confidence, kind="stable")
    errors = (~preds.correct[order]).astype(np.float64)
    k = np.arange(1, len(preds) + 1)
    return k / len(preds), np.cumsum(errors) / k


def aurc(preds: PredictionSet) -> float:
    return float(np.mean(risk_coverage(preds)[1]))


def auroc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney estimate of ``P(pos > neg) + P(pos == neg) / 2``."""
    pos, neg = np.asarray(pos, dtype=np.float64), np.asarray(neg, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ContractError("auroc: need at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    n1, n0 = len(pos), len(neg)
    return float((ranks[:n1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def aupr(pos: np.ndarray, neg: np.ndarray) -> float:
    """Average precision with positives scoring high; tied scores form one threshold."""
    pos, neg = np.asarray(pos, dtype=np.float64), np.asarray(neg, dtype=np.float64)
    if len(pos) == 0:
        raise ContractError("aupr: need at least one positive score")
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], is_pos[order]
    tp, fp = np.cumsum(lab), np.cumsum(1.0 - lab)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]     # end of each tie group
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / len(pos)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _split_conf(preds: PredictionSet, metric: str) -> tuple[np.ndarray, np.ndarray]:
    corr = preds.correct
    if corr.all() or not corr.any():
        raise ContractError(f"{metric}: needs at least one correct and one incorrect prediction")
    conf = preds.confidence
    return conf[corr], conf[~corr]


def failure_auroc(preds: PredictionSet) -> float:
    return auroc(*_split_conf(preds, "failure_auroc"))


def fpr_at_tpr(pos: np.ndarray, neg: np.ndarray, tpr: float = 0.95) -> float:
    """Smallest FPR over thresholds ``score >= thr`` whose TPR reaches ``tpr``."""
    thr = np.unique(np.concatenate([pos, neg]))
    tprs = (pos[None, :] >= thr[:, None]).mean(axis=1)
    fprs = (neg[None, :] >= thr[:, None]).mean(axis=1)
    return float(fprs[tprs >= tpr - 1e-12].min())


def fpr95(preds: PredictionSet) -> float:
    return fpr_at_tpr(*_split_conf(preds, "fpr95"))


# -- OOD ------------------------------------------------------------------------
def ood_scores(probs: np.ndarray, method: str) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if method == "msp":
        return probs.max(axis=1)
    if method == "entropy":
        p = np.clip(probs, NLL_FLOOR, 1.0)
        return np.sum(probs * np.log(p), axis=1)     # negative entropy
    raise ValueError(f"unknown OOD scoring method {method!r}")


@dataclass
class OODScore:
    method: str
    in_scores: np.ndarray
    out_scores: np.ndarray
    auroc: float
    aupr: float

    def to_dict(self, include_scores: bool = False) -> dict:
        d = {"method": self.method, "auroc": self.auroc, "aupr": self.aupr,
             "n_in": int(len(self.in_scores)), "n_out": int(len(self.out_scores))}
        if include_scores:
            d["in_scores"] = self.in_scores.tolist()
            d["out_scores"] = self.out_scores.tolist()
        return d


def ood_eval(in_probs, out_probs, method: str = "msp") -> OODScore:
    """Score in-distribution (positive) against OOD inputs."""
    if isinstance(in_probs, PredictionSet):
        in_probs = in_probs.probs
    if isinstance(out_probs, PredictionSet):
        out_probs = out_probs.probs
    if len(in_probs) == 0 or len(out_probs) == 0:
        raise ContractError("ood_eval: both sets must be non-empty")
    s_in, s_out = ood_scores(in_probs, method), ood_scores(out_probs, method)
    return OODScore(method, s_in, s_out, auroc(s_in, s_out), aupr(s_in, s_out))


# -- reports ------------------------------------------------------------------------
@dataclass
class CalibrationReport:
    n: int
    n_classes: int
    acc: float
    mcc: float | None
    ece: float
    nll: float
    brier: float
    aurc: float
    auroc: float | None
    fpr95: float | None
    n_bins: int = N_BINS
    nll_floor: float = NLL_FLOOR
    reliability: list = field(default_factory=list)
    risk_coverage: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def rendered(self) -> dict:
        """Values in the customary display units (percent, NLL x 10)."""
        pct = lambda v: None if v is None else 100.0 * v
        return {"ACC": pct(self.acc), "MCC": pct(self.mcc), "AURC": pct(self.aurc),
                "AUROC": pct(self.auroc), "FPR95": pct(self.fpr95), "ECE": pct(self.ece),
                "NLLx10": 10.0 * self.nll, "Brier": pct(self.brier)}


def calibration_report(preds: PredictionSet, n_bins: int = N_BINS) -> CalibrationReport:
    corr = preds.correct
    mixed = corr.any() and not corr.all()
    cov, risk = risk_coverage(preds)
    return CalibrationReport(
        n=len(preds), n_classes=preds.n_classes, acc=accuracy(preds),
        mcc=mcc(preds) if preds.n_classes == 2 else None,
        ece=ece(preds, n_bins), nll=nll(preds), brier=brier(preds), aurc=aurc(preds),
        auroc=failure_auroc(preds) if mixed else None,
        fpr95=fpr95(preds) if mixed else None, n_bins=n_bins,
        reliability=reliability_bins(preds, n_bins),
        risk_coverage=[[float(c), float(r)] for c, r in zip(cov, risk)])


# -- prediction ---------------------------------------------------------------------
def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_calibrated(source, X, labels, n_draws: int = 10, seed: int = 0,
                       batch: int = 256) -> PredictionSet:
    """Average softmax probabilities over ``n_draws`` stochastic forwards.

    ``source`` is a ``Backbone``, a ``ProbabilityPath``, or a ``(path, kernel)``
    pair, in which case ``X_0`` comes from the kernel chain and the path head
    produces the logits. Deterministic sources use a single draw.
    """
    from .backbone import GP_MODES, Backbone, backbone_forward
    from .kernelnet import generate
    from .pathify import ProbabilityPath, path_logits

    if n_draws < 1:
        raise ContractError("n_draws must be >= 1")
    X = np.asarray(X)
    if isinstance(source, tuple):
        path, kp = source

        def draw(xb, s):
            X0 = generate(kp, path.embed(xb), path.T, seed=s).final
            with tn.no_grad():
                return path.head(X0).data
        stochastic = True
    elif isinstance(source, ProbabilityPath):
        stochastic = any(b["mode"] in GP_MODES for b in source.backbone.blocks)

        def draw(xb, s):
            return path_logits(source, xb, noise=stochastic, seed=s)
    elif isinstance(source, Backbone):
        stochastic = any(b["mode"] in GP_MODES for b in source.blocks)

        def draw(xb, s):
            with tn.no_grad():
                return backbone_forward(source, xb, noise=stochastic, seed=s)[0].data
    else:
        raise TypeError(f"cannot predict with {type(source).__name__}")

    draws = n_draws if stochastic else 1
    out = []
    for b, lo in enumerate(range(0, len(X), batch)):
        xb = X[lo:lo + batch]
        acc = 0.0
        for j in range(draws):
            s = int(make_rng(seed, "eval-draw", b, j).integers(0, 2**31 - 1))
            acc = acc + _softmax(draw(xb, s))
        out.append(acc / draws)
    probs = np.concatenate(out) if out else np.zeros((0, 1))
    return PredictionSet(probs / probs.sum(axis=1, keepdims=True), labels)


# -- persistence ----------------------------------------------------------------------
def dump_predictions(preds: PredictionSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"prob_{c}" for c in range(preds.n_classes)] + ["label"])
        for row, y in zip(preds.probs, preds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def load_predictions(path) -> PredictionSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "label" or not all(h.startswith("prob_") for h in header[:-1]):
            raise ValueError(f"{path}: expected header prob_0..prob_{{C-1}},label")
        rows = [r for r in reader if r]
    probs = np.array([[float(v) for v in r[:-1]] for r in rows])
    return PredictionSet(probs, np.array([int(r[-1]) for r in rows]))


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def plot_report(report: CalibrationReport, path) -> None:
    """Reliability diagram and risk-coverage curve as a deterministic SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "pathcal", "svg.fonttype": "none"}):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
        bins = [b for b in report.reliability if b["count"]]
        width = 1.0 / report.n_bins
        ax1.bar([b["lo"] for b in bins], [b["acc"] for b in bins], width=width, align="edge",
                edgecolor="black", label="accuracy")
        ax1.plot([0, 1], [0, 1], "k--", lw=1)
        ax1.set(xlabel="confidence", ylabel="accuracy", xlim=(0, 1), ylim=(0, 1),
                title=f"ECE {100 * report.ece:.2f}%")
        cr = np.asarray(report.risk_coverage)
        ax2.plot(cr[:, 0], cr[:, 1])
        ax2.set(xlabel="coverage", ylabel="risk", xlim=(0, 1), title=f"AURC {100 * report.aurc:.2f}%")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
