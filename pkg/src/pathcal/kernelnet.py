"""Timestep-conditioned single-block transition kernel ``q(X_{t-1} | X_t, t)``.

One transformer block modulated by AdaLN-Zero, followed by a modulated final
norm feeding two token-wise heads: the mean of ``X_{t-1}`` and a positive
diagonal scale. By default the mean head predicts the update
``X_{t-1} - X_t`` (``residual=True``). The modulation weights start at zero,
so a fresh kernel is ``X + mean_head(LN(X))`` (or ``mean_head(LN(X))``) for
every ``t``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .backbone import mhsa_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import NumericError, ShapeError
from .rng import make_rng
from .tensor import Tensor

SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class KernelConfig:
    T: int = 4
    d_model: int = 32
    n_heads: int = 4
    n_tokens: int = 16
    mlp_ratio: int = 4
    scale_floor: float = SCALE_FLOOR
    init_scale: float = 0.05
    residual: bool = True
    init_seed: int = 0

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ShapeError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.T < 0:
            raise ValueError(f"T must be non-negative, got {self.T}")
        if not self.scale_floor > 0:
            raise ValueError("scale_floor must be positive")


@dataclass
class KernelParams:
    config: KernelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    def copy(self) -> "KernelParams":
        return KernelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                          for k, v in self.params.items()})


def init_kernel(cfg: KernelConfig, seed: int | None = None) -> KernelParams:
    cfg.validate()
    rng = make_rng(cfg.init_seed if seed is None else seed, "kernel-init")
    d, H, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    hidden = cfg.mlp_ratio * d

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    std = 1.0 / math.sqrt(d)
    p = {
        "t_w1": normal((d, d), std), "t_b1": zeros((d,)),
        "t_w2": normal((d, d), std), "t_b2": zeros((d,)),
        # AdaLN-Zero: shift/scale/gate for attention and MLP, all zero at init
        "ada_w": zeros((d, 6 * d)), "ada_b": zeros((6 * d,)),
        "wq": normal((H, d, dh), std), "wk": normal((H, d, dh), std),
        "wv": normal((H, d, dh), std), "o": normal((d, H * dh), std),
        "w1": normal((d, hidden), std), "b1": zeros((hidden,)),
        "w2": normal((hidden, d), 1.0 / math.sqrt(hidden)), "b2": zeros((d,)),
        "fin_w": zeros((d, 2 * d)), "fin_b": zeros((2 * d,)),
        "mean_w": normal((d, d), std), "mean_b": zeros((d,)),
        "scale_w": zeros((d, d)),
        "scale_b": Tensor(np.full((d,), _softplus_inv(cfg.init_scale)), requires_grad=True),
    }
    return KernelParams(cfg, p)


def _softplus_inv(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


def timestep_encoding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal encoding of integer timesteps; returns [len(t), dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb


def _check_t(t, T: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(t))
    if arr.size == 0 or np.any(arr < 1) or np.any(arr > T) or np.any(arr != np.round(arr)):
        raise IndexError(f"timestep {t!r} outside [1, {T}]")
    return arr.astype(np.int64)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


def kernel_forward(kp: KernelParams, X_t, t) -> tuple[Tensor, Tensor]:
    """Return ``(m, scale)`` for ``X_t`` [B,N,d] (or [N,d]) at step ``t`` (int or per-row array)."""
    cfg, p = kp.config, kp.params
    X = tn.as_tensor(X_t)
    squeeze = X.ndim == 2
    if squeeze:
        X = X.reshape(1, *X.shape)
    B, N, d = X.shape
    if d != cfg.d_model:
        raise ShapeError(f"kernel expects width {cfg.d_model}, got {d}")
    ts = _check_t(t, cfg.T)
    if ts.size == 1:
        ts = np.repeat(ts, B)
    elif ts.size != B:
        raise ShapeError(f"{ts.size} timesteps for a batch of {B}")

    c = Tensor(timestep_encoding(ts, d))
    c = tn.gelu(c @ p["t_w1"] + p["t_b1"]) @ p["t_w2"] + p["t_b2"]
    c = tn.gelu(c)
    mod = (c @ p["ada_w"] + p["ada_b"]).reshape(B, 1, 6 * d)
    sh1, sc1, g1, sh2, sc2, g2 = (mod[:, :, i * d:(i + 1) * d] for i in range(6))

    h = X + g1 * mhsa_forward(p, _modulate(tn.layer_norm(X), sh1, sc1))
    u = _modulate(tn.layer_norm(h), sh2, sc2)
    h = h + g2 * (tn.gelu(u @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"])

    fin = (c @ p["fin_w"] + p["fin_b"]).reshape(B, 1, 2 * d)
    z = _modulate(tn.layer_norm(h), fin[:, :, :d], fin[:, :, d:])
    m = z @ p["mean_w"] + p["mean_b"]
    if cfg.residual:
        m = m + X
    scale = tn.softplus(z @ p["scale_w"] + p["scale_b"]) + cfg.scale_floor
    if squeeze:
        m, scale = m.reshape(N, d), scale.reshape(N, d)
    return m, scale


def sample_step(kp: KernelParams, X_t, t, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``X_{t-1} = m + scale * eps``; returns the sample and the ``eps`` used."""
    with tn.no_grad():
        m, s = kernel_forward(kp, X_t, t)
    eps = make_rng(seed, "kernel-noise", int(np.max(t))).standard_normal(m.shape)
    return m.data + s.data * eps, eps


@dataclass
class KernelTrace:
    """Generated states ``X_T .. X_0`` with the kernel mean and scale at each step."""
    states: list
    means: list
    scales: list
    eps: list
    seed: int

    @property
    def final(self):
        return self.states[-1]


def generate(kp: KernelParams, X_T, T: int | None = None, seed: int = 0, noise: bool = True,
             differentiable: bool = False, rng: np.random.Generator | None = None) -> KernelTrace:
    """Iterate the kernel from ``t = T`` down to 1.

    With ``differentiable=True`` states stay on the tape so a loss on ``X_0``
    reaches the kernel weights through the reparameterized noise.
    """
    T = kp.config.T if T is None else T
    if T > kp.config.T:
        raise IndexError(f"chain length {T} exceeds kernel horizon {kp.config.T}")
    if rng is None:
        rng = make_rng(seed, "kernel-noise")
    X = tn.as_tensor(X_T) if differentiable else np.asarray(X_T, dtype=np.float64)
    trace = KernelTrace([X], [], [], [], seed)
    for t in range(T, 0, -1):
        if differentiable:
            m, s = kernel_forward(kp, X, t)
        else:
            with tn.no_grad():
                m, s = kernel_forward(kp, X, t)
            m, s = m.data, s.data
        eps = rng.standard_normal(m.shape) if noise else None
        X = m + s * eps if noise else m
        data = X.data if differentiable else X
        if not np.all(np.isfinite(data)):
            raise NumericError(f"kernel chain diverged at t={t}")
        trace.states.append(X)
        trace.means.append(m)
        trace.scales.append(s)
        trace.eps.append(eps)
    return trace


def save_kernel(kp: KernelParams, path, *, seed: int, config_hash: str) -> str:
    cfg = asdict(kp.config)
    return save_checkpoint(path, kp.state_arrays(), seed=seed, config_hash=config_hash,
                           sections={"kernel": cfg})


def load_kernel(path) -> tuple[KernelParams, dict]:
    arrays, header = load_checkpoint(path)
    kp = init_kernel(KernelConfig(**header["sections"]["kernel"]))
    kp.load_arrays(arrays)
    return kp, header
