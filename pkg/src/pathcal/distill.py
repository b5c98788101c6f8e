"""Fit the transition kernel to a frozen probability path.

The objective mixes three terms: squared error between the kernel mean and the
path mean at the same state, squared error between the kernel's diagonal scale
and the path's per-coordinate standard deviation, and cross-entropy of the
path head on ``X_0`` generated by the kernel itself.
"""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from . import tensor as tn
from .errors import ContractError, ParameterizationError, TrainingError
from .kernelnet import KernelParams, generate, kernel_forward
from .optim import LrSchedule, adam_step, init_optim, lr_at, zero_grads
from .pathify import ProbabilityPath, simulate_path, transition_eval
from .rng import make_rng
from .tensor import Tensor

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    mean: float
    cholesky: float
    nll: float

    def __post_init__(self):
        if min(self.mean, self.cholesky, self.nll) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.mean, self.cholesky, self.nll)


GP_WEIGHTS = LossWeights(0.5, 0.2, 0.3)
DETERMINISTIC_WEIGHTS = LossWeights(0.8, 0.0, 0.2)


def default_weights(path: ProbabilityPath) -> LossWeights:
    return GP_WEIGHTS if path_is_stochastic(path) else DETERMINISTIC_WEIGHTS


def path_is_stochastic(path: ProbabilityPath) -> bool:
    return any(b["mode"] in ("sgpa", "kep") for b in path.backbone.blocks)


# -- Gaussian algebra ----------------------------------------------------------
def kl_gaussian(p_mean, p_factor, q_mean, q_scale) -> float:
    """``KL(N(p_mean, L L^T) || N(q_mean, diag(q_scale^2)))``.

    ``p_factor`` may be a dense [D,K] factor or a length-D diagonal. A
    rank-deficient ``L L^T`` has no density and yields ``inf``.
    """
    p_mean = np.asarray(p_mean, dtype=np.float64).reshape(-1)
    q_mean = np.asarray(q_mean, dtype=np.float64).reshape(-1)
    q_scale = np.asarray(q_scale, dtype=np.float64).reshape(-1)
    if np.any(q_scale <= 0):
        raise ParameterizationError("q scale must be strictly positive")
    L = np.asarray(p_factor, dtype=np.float64)
    L = np.diag(L.reshape(-1)) if L.ndim <= 1 else L
    D = p_mean.size
    cov = L @ L.T
    sign, logdet_p = np.linalg.slogdet(cov)
    if sign <= 0:
        return math.inf
    inv_var = 1.0 / q_scale**2
    diff = q_mean - p_mean
    trace = float(np.sum(np.diag(cov) * inv_var))
    maha = float(np.sum(diff * diff * inv_var))
    logdet_q = 2.0 * float(np.sum(np.log(q_scale)))
    return 0.5 * (trace + maha - D + logdet_q - logdet_p)


def mahalanobis_term(p_mean, q_mean, q_scale) -> float:
    d = (np.asarray(q_mean) - np.asarray(p_mean)).reshape(-1) / np.asarray(q_scale).reshape(-1)
    return 0.5 * float(d @ d)


def gaussian_cross_entropy(p_mean, p_var, q_mean, q_scale) -> np.ndarray:
    """``E_p[-log q]`` for diagonal ``q``; only the diagonal of ``p``'s covariance enters."""
    inv_var = 1.0 / q_scale**2
    diff = q_mean - p_mean
    return 0.5 * np.sum((p_var + diff * diff) * inv_var + 2.0 * np.log(q_scale) + _LOG_2PI,
                        axis=-1)


# -- losses on a simulated path --------------------------------------------------
def _stack_targets(trace, ts: np.ndarray):
    """Gather ``X_t``, ``m_t`` and path row norms for a per-element ``t`` array."""
    rows = np.arange(len(ts))
    X = np.stack([trace.state_at(t) for t in range(trace_T(trace), 0, -1)])  # [T, B, N, d]
    M = np.stack([tr.mean for tr in trace.transitions])
    S = np.stack([tr.row_norms() for tr in trace.transitions])
    idx = trace_T(trace) - ts
    return X[idx, rows], M[idx, rows], S[idx, rows]


def trace_T(trace) -> int:
    return len(trace.transitions)


def loss_mean(trace, kp: KernelParams, ts: np.ndarray | None = None) -> Tensor:
    """``(1/T) sum_t E ||m_theta(X_t, t) - m_t(X_t)||^2``; with ``ts`` one step per element."""
    if ts is not None:
        X, M, _ = _stack_targets(trace, ts)
        m, _ = kernel_forward(kp, X, ts)
        return ((m - M) ** 2).sum() * (1.0 / len(ts))
    T = trace_T(trace)
    total = Tensor(0.0)
    for t in range(T, 0, -1):
        X = trace.state_at(t)
        m, _ = kernel_forward(kp, X, t)
        total = total + ((m - trace.transition_at(t).mean) ** 2).sum() * (1.0 / X.shape[0])
    return total * (1.0 / T)


def loss_cholesky(trace, kp: KernelParams, ts: np.ndarray | None = None) -> Tensor:
    """``(1/T) sum_t E ||scale_theta(X_t, t) - rownorm(L_t)||^2``.

    The diagonal kernel scale is compared with the per-coordinate standard
    deviation of the path, the only factor statistic a diagonal family can match.
    """
    if not any(tr.stochastic for tr in trace.transitions):
        raise ContractError("path is deterministic; set the Cholesky weight to 0")
    if ts is not None:
        X, _, S = _stack_targets(trace, ts)
        _, s = kernel_forward(kp, X, ts)
        return ((s - S) ** 2).sum() * (1.0 / len(ts))
    T = trace_T(trace)
    total = Tensor(0.0)
    for t in range(T, 0, -1):
        X = trace.state_at(t)
        _, s = kernel_forward(kp, X, t)
        total = total + ((s - trace.transition_at(t).row_norms()) ** 2).sum() * (1.0 / X.shape[0])
    return total * (1.0 / T)


def loss_perf(path: ProbabilityPath, kp: KernelParams, X, y, seed: int = 0,
              n_samples: int = 1) -> Tensor:
    """Cross-entropy of the path head on kernel-generated ``X_0``, averaged over chains."""
    X_T = path.embed(X)
    rng = make_rng(seed, "perf-chain")
    total = Tensor(0.0)
    for _ in range(n_samples):
        X0 = generate(kp, X_T, path.T, differentiable=True, rng=rng).final
        total = total + tn.cross_entropy(path.head(X0), y)
    return total * (1.0 / n_samples)


# -- variational bound ----------------------------------------------------------------
@dataclass
class StepGaussian:
    """One transition evaluated on ``M`` chains: mean/var [M,D] and a sampler.

    ``factor`` [M,D,K] is optional and only needed for densities of ``p``.
    """
    mean: np.ndarray
    var: np.ndarray
    sampler: Callable[[np.random.Generator], np.ndarray]
    factor: np.ndarray | None = None

    def sample(self, rng) -> np.ndarray:
        return self.sampler(rng)

    def full_rank_cholesky(self) -> np.ndarray | None:
        if self.factor is None:
            return None
        cov = self.factor @ np.swapaxes(self.factor, -1, -2)
        try:
            return np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            return None

    def entropy(self) -> np.ndarray | None:
        C = self.full_rank_cholesky()
        if C is None:
            return None
        D = self.mean.shape[-1]
        logdet = 2.0 * np.sum(np.log(np.diagonal(C, axis1=-2, axis2=-1)), axis=-1)
        return 0.5 * (D * (1.0 + _LOG_2PI) + logdet)


def dense_step(mean: np.ndarray, factor: np.ndarray) -> StepGaussian:
    var = np.sum(factor**2, axis=-1)

    def sampler(rng):
        eps = rng.standard_normal(factor.shape[:-2] + (factor.shape[-1],))
        return mean + np.einsum("mdk,mk->md", factor, eps)

    return StepGaussian(mean, var, sampler, factor)


@dataclass
class VlbEstimate:
    nll: float | None
    nll_se: float | None
    bound: float
    bound_se: float
    kl_sum: float | None
    cross_entropy_sum: float
    cross_entropy_se: float
    entropy: float | None
    entropy_included: bool
    n_chains: int

    @property
    def combined_se(self) -> float:
        return math.hypot(self.nll_se or 0.0, self.bound_se)

    def holds(self, k: float = 3.0) -> bool | None:
        if self.nll is None:
            return None
        return self.nll <= self.bound + k * self.combined_se

    def to_dict(self) -> dict:
        d = asdict(self)
        d["combined_se"] = self.combined_se
        return d


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


def _diag_logpdf(x: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """log N(x_i; mean_j, diag scale_j^2) as [I, J]."""
    z = (x[:, None, :] - mean[None]) / scale[None]
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(scale), axis=-1)[None] \
        - 0.5 * x.shape[-1] * _LOG_2PI


def _chol_logpdf(x: np.ndarray, mean: np.ndarray, C: np.ndarray) -> np.ndarray:
    """log N(x_i; mean_j, C_j C_j^T) as [I, J]."""
    Cinv = np.linalg.inv(C)
    z = np.einsum("jab,ijb->ija", Cinv, x[:, None, :] - mean[None], optimize=True)
    logdet = 2.0 * np.sum(np.log(np.diagonal(C, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * logdet[None] - 0.5 * x.shape[-1] * _LOG_2PI


def _q_sample(mean, scale, rng):
    return mean + scale * rng.standard_normal(mean.shape)


def chain_bound(p_step: Callable[[int, np.ndarray], StepGaussian],
                q_step: Callable[[int, np.ndarray], tuple[np.ndarray, np.ndarray]],
                x_T: np.ndarray, T: int, n_chains: int = 1000, n_inner: int = 2000,
                seed: int = 0) -> VlbEstimate:
    """Monte-Carlo check of ``-log q(X_0|X_T)`` against ``H(p(X_0|X_T)) + E sum_t KL(p_t||q_t)``.

    Outer chains are drawn from ``p``. Marginal densities of ``X_0`` under
    ``p`` and ``q`` are estimated by averaging the last-step density over
    ``n_inner`` independent chains of each model run up to ``X_1``. When any
    ``p`` step lacks a density the entropy and the NLL are not reported and
    the bound is the entropy-free cross-entropy sum.
    """
    if T < 1:
        raise ValueError("chain must have at least one step")
    rng = make_rng(seed, "vlb")
    x_T = np.asarray(x_T, dtype=np.float64).reshape(-1)
    X = np.tile(x_T, (n_chains, 1))
    ce = np.zeros(n_chains)
    ent = np.zeros(n_chains)
    has_density = True
    for t in range(T, 0, -1):
        p = p_step(t, X)
        qm, qs = q_step(t, X)
        ce += gaussian_cross_entropy(p.mean, p.var, qm, qs)
        h = p.entropy()
        if h is None:
            has_density = False
        else:
            ent += h
        X = p.sample(rng)
    ce_mean, ce_se = _mean_se(ce)
    if not has_density:
        return VlbEstimate(None, None, ce_mean, ce_se, None, ce_mean, ce_se, None, False, n_chains)

    x0 = X
    Xp = np.tile(x_T, (n_inner, 1))
    Xq = Xp.copy()
    for t in range(T, 1, -1):
        Xp = p_step(t, Xp).sample(rng)
        Xq = _q_sample(*q_step(t, Xq), rng)
    p1 = p_step(1, Xp)
    qm, qs = q_step(1, Xq)
    log_n = math.log(n_inner)
    nll_i = -(logsumexp(_diag_logpdf(x0, qm, qs), axis=1) - log_n)
    h0_i = -(logsumexp(_chol_logpdf(x0, p1.mean, p1.full_rank_cholesky()), axis=1) - log_n)
    kl_i = ce - ent
    nll, nll_se = _mean_se(nll_i)
    bound, bound_se = _mean_se(h0_i + kl_i)
    return VlbEstimate(nll, nll_se, bound, bound_se, float(np.mean(kl_i)), ce_mean, ce_se,
                       float(np.mean(h0_i)), True, n_chains)


def vlb_gap(path: ProbabilityPath, kp: KernelParams, X_T, mc_samples: int = 1000,
            seed: int = 0, batch: int = 250) -> VlbEstimate:
    """Bound check for one embedded input ``X_T`` [N,d] on the real path.

    Path transitions are low rank (or exactly deterministic), so this usually
    returns the entropy-free bound with the NLL flagged as unavailable.
    """
    if mc_samples < 1000:
        raise ValueError("mc_samples must be at least 1000")
    X_T = np.asarray(X_T, dtype=np.float64)
    shape = X_T.shape

    def p_step(t, X):
        means, varis, samples = [], [], []
        for start in range(0, X.shape[0], batch):
            tr = transition_eval(path, t, X[start:start + batch].reshape(-1, *shape))
            means.append(tr.flat_mean)
            varis.append(tr.variance().reshape(tr.mean.shape[0], -1))
            samples.append(tr)
        mean, var = np.concatenate(means), np.concatenate(varis)

        def sampler(rng):
            out = []
            for tr in samples:
                eps = rng.standard_normal(tr.noise_shape()) if tr.stochastic else None
                out.append(tr.sample(eps).reshape(tr.mean.shape[0], -1))
            return np.concatenate(out)

        return StepGaussian(mean, var, sampler)

    def q_step(t, X):
        ms, ss = [], []
        with tn.no_grad():
            for start in range(0, X.shape[0], batch):
                m, s = kernel_forward(kp, X[start:start + batch].reshape(-1, *shape), t)
                ms.append(m.data.reshape(m.shape[0], -1))
                ss.append(s.data.reshape(s.shape[0], -1))
        return np.concatenate(ms), np.concatenate(ss)

    return chain_bound(p_step, q_step, X_T.reshape(-1), path.T, n_chains=mc_samples, seed=seed)


# -- training loop --------------------------------------------------------------------
@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-2
    min_lr: float = 1e-5
    warmup_epochs: int = 2
    cycle_epochs: int = 30
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weights: LossWeights | None = None
    perf_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class DistillReport:
    weights: tuple[float, float, float]
    epochs: list[dict] = field(default_factory=list)
    kernel_parameters: int = 0
    backbone_parameters: int = 0
    backbone_sha256: str = ""
    seed: int = 0
    wall_clock: float = 0.0
    bound: dict | None = None
    factor_mismatch: float | None = None

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d


def backbone_checksum(path: ProbabilityPath) -> str:
    h = hashlib.sha256()
    for name, arr in path.backbone.state_arrays().items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def distill_train(path: ProbabilityPath, kp: KernelParams, dataset, config: DistillConfig,
                  log: Callable[[str], None] | None = None) -> tuple[KernelParams, DistillReport]:
    """Minimize the weighted objective over ``dataset`` split ``"train"``.

    Each batch simulates a fresh stochastic path trace and draws one uniform
    ``t`` per element for the matching terms.
    """
    w = config.weights or default_weights(path)
    stochastic = path_is_stochastic(path)
    if not stochastic and w.cholesky > 0:
        raise ContractError("path is deterministic; set the Cholesky weight to 0")
    checksum = backbone_checksum(path)
    path.backbone.set_trainable(False)
    params = kp.parameters()
    state = init_optim(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                       weight_decay=config.weight_decay)
    sched = LrSchedule(config.lr, min(config.min_lr, config.lr), config.warmup_epochs,
                       config.cycle_epochs)
    report = DistillReport(w.as_tuple(), kernel_parameters=kp.n_parameters(),
                           backbone_parameters=path.backbone.n_parameters(),
                           backbone_sha256=checksum, seed=config.seed)
    Xtr, ytr = dataset.split("train")
    n = len(ytr)
    start_time = time.perf_counter()
    for epoch in range(config.epochs):
        state.lr = lr_at(sched, epoch)
        order = make_rng(config.seed, "distill-shuffle", epoch).permutation(n)
        sums = np.zeros(4)
        for step, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            step_rng = make_rng(config.seed, "distill-step", epoch, step)
            trace = simulate_path(path, path.embed(Xtr[idx]), noise=stochastic,
                                  seed=int(step_rng.integers(0, 2**31 - 1)))
            ts = step_rng.integers(1, path.T + 1, size=len(idx))
            parts = [loss_mean(trace, kp, ts)]
            parts.append(loss_cholesky(trace, kp, ts) if w.cholesky > 0 else Tensor(0.0))
            parts.append(loss_perf(path, kp, Xtr[idx], ytr[idx],
                                   seed=int(step_rng.integers(0, 2**31 - 1)),
                                   n_samples=config.perf_samples) if w.nll > 0 else Tensor(0.0))
            loss = parts[0] * w.mean + parts[1] * w.cholesky + parts[2] * w.nll
            if not np.isfinite(loss.item()):
                raise TrainingError(f"distillation loss diverged at epoch {epoch}, step {step}")
            zero_grads(params)
            loss.backward()
            for p in params:
                if p.grad is None:          # e.g. the scale head when only the mean term is on
                    p.grad = np.zeros_like(p.data)
            adam_step(params, state)
            vals = [p.item() for p in parts] + [loss.item()]
            sums += np.array(vals) * len(idx)
        avg = sums / n
        report.epochs.append({"epoch": epoch, "lr": state.lr, "loss_mean": avg[0],
                              "loss_cholesky": avg[1], "loss_perf": avg[2], "total": avg[3]})
        if log is not None:
            log(f"distill epoch {epoch}: total {avg[3]:.4f} mean {avg[0]:.4f} "
                f"chol {avg[1]:.4f} perf {avg[2]:.4f}")
    zero_grads(params)
    report.wall_clock = time.perf_counter() - start_time
    if backbone_checksum(path) != checksum:
        raise ContractError("backbone weights changed during distillation")
    return kp, report


def factor_mismatch(path: ProbabilityPath, kp: KernelParams, X_T) -> float:
    """Mean squared gap between kernel scale and path row norms along a noise-free trace."""
    trace = simulate_path(path, X_T, noise=False)
    gaps = []
    with tn.no_grad():
        for tr, X in zip(trace.transitions, trace.states[:-1]):
            _, s = kernel_forward(kp, X, tr.t)
            gaps.append(float(np.mean((s.data - tr.row_norms()) ** 2)))
    return float(np.mean(gaps))
