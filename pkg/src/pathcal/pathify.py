"""Repartition a backbone into a chain of Gaussian transitions ending in attention.

The original block ``k`` computes ``Z = Att(LN(X)) + X`` then
``X' = MLP(LN(Z)) + Z``. The repartitioned step ``t`` (``k = T - t``) instead
computes::

    Z_t     = X_t                              if t == T
            = MLP_{k-1}(LN(X_t)) + X_t         otherwise
    X_{t-1} = Att_k(LN(Z_t)) + Z_t

so every step ends with attention and is Gaussian given ``X_t``. The MLP of the
last block moves into the solution head. Path states are therefore the
backbone's post-attention residuals ``Z``; the final logits are unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .backbone import Backbone, attention_forward, draw_noise, mlp
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, NumericError
from .rng import make_rng
from .tensor import Tensor


@dataclass
class GaussianTransition:
    """``X_{t-1} | X_t ~ N(mean, L L^T)`` with ``L`` kept in per-head structured form.

    ``mean`` is [B,N,d]. For stochastic heads ``G`` [B,H,c,N,r] and ``P``
    [H,c,d] define ``L[(n,k), (h,i,j)] = G[h,i,n,j] * P[h,i,k]``; the dense
    factor is block-structured with one column block per head.
    """
    t: int
    mean: np.ndarray
    G: np.ndarray | None = None
    P: np.ndarray | None = None

    @property
    def stochastic(self) -> bool:
        return self.G is not None

    @property
    def flat_mean(self) -> np.ndarray:
        return self.mean.reshape(self.mean.shape[0], -1)

    def variance(self) -> np.ndarray:
        """Diagonal of ``L L^T`` as [B,N,d]."""
        if self.G is None:
            return np.zeros_like(self.mean)
        return np.einsum("bhinj,hik->bnk", self.G**2, self.P**2, optimize=True)

    def row_norms(self) -> np.ndarray:
        return np.sqrt(self.variance())

    def blocks(self) -> list[np.ndarray]:
        """Dense factor blocks, one [B, N*d, c*r] array per head."""
        B, N, d = self.mean.shape
        if self.G is None:
            return [np.zeros((B, N * d, 0))]
        out = []
        for h in range(self.G.shape[1]):
            blk = np.einsum("binj,ik->bnkij", self.G[:, h], self.P[h], optimize=True)
            out.append(blk.reshape(B, N * d, -1))
        return out

    def dense_factor(self) -> np.ndarray:
        """Full factor [B, N*d, H*c*r] (zero columns when deterministic)."""
        return np.concatenate(self.blocks(), axis=-1)

    def noise_shape(self) -> tuple:
        B, H, c, _, r = self.G.shape
        return (B, H, c, r)

    def sample(self, eps: np.ndarray | None) -> np.ndarray:
        if self.G is None or eps is None:
            return self.mean.copy()
        return self.mean + np.einsum("bhinj,bhij,hik->bnk", self.G, eps, self.P, optimize=True)


class ProbabilityPath:
    """Read-only view of a backbone as ``T`` Gaussian transitions (weights are shared)."""

    def __init__(self, backbone: Backbone):
        if backbone.depth == 0:
            raise ContractError("cannot build a probability path from a backbone with no blocks")
        self.backbone = backbone

    @property
    def T(self) -> int:
        return self.backbone.depth

    def embed(self, X) -> np.ndarray:
        with tn.no_grad():
            return self.backbone.embed(X).data

    def block_index(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep t={t} outside [1, {self.T}]")
        return self.T - t

    def z_state(self, t: int, X_t) -> Tensor:
        k = self.block_index(t)
        X_t = tn.as_tensor(X_t)
        if t == self.T:
            return X_t
        prev = self.backbone.blocks[k - 1]
        return mlp(prev, tn.layer_norm(X_t, prev["ln2_g"], prev["ln2_b"])) + X_t

    def head(self, X0) -> Tensor:
        """Solution head of the path: the last block's MLP followed by the backbone head."""
        last = self.backbone.blocks[-1]
        X0 = tn.as_tensor(X0)
        out = mlp(last, tn.layer_norm(X0, last["ln2_g"], last["ln2_b"])) + X0
        return self.backbone.head(out)


def repartition(backbone: Backbone) -> ProbabilityPath:
    return ProbabilityPath(backbone)


def transition_eval(path: ProbabilityPath, t: int, X_t) -> GaussianTransition:
    """Mean ``Att_mean(LN(Z_t)) + Z_t`` and the attention noise factor for step ``t``."""
    k = path.block_index(t)
    blk = path.backbone.blocks[k]
    with tn.no_grad():
        Z = path.z_state(t, X_t)
        att = attention_forward(blk, path.backbone.config.attention(blk["mode"]),
                                tn.layer_norm(Z, blk["ln1_g"], blk["ln1_b"]))
        mean = (att.mean + Z).data
        if att.stochastic:
            return GaussianTransition(t, mean, att.G.data, att.P.data)
    return GaussianTransition(t, mean)


@dataclass
class PathTrace:
    """States ``X_T .. X_0`` (``states[0]`` is ``X_T``) and the transition at each step."""
    states: list[np.ndarray]
    transitions: list[GaussianTransition]
    eps: list[np.ndarray | None]
    seed: int
    noise: bool

    @property
    def ts(self) -> list[int]:
        return [tr.t for tr in self.transitions]

    def state_at(self, t: int) -> np.ndarray:
        """``X_t`` for ``t`` in ``[0, T]``."""
        T = len(self.transitions)
        return self.states[T - t]

    def transition_at(self, t: int) -> GaussianTransition:
        return self.transitions[len(self.transitions) - t]


def simulate_path(path: ProbabilityPath, X_T, noise: bool = False, seed: int = 0) -> PathTrace:
    """Iterate ``t = T .. 1``, drawing ``X_{t-1} ~ N(m_t, L_t L_t^T)`` (or the mean)."""
    rng = make_rng(seed, "gp-noise") if noise else None
    X = np.asarray(X_T, dtype=np.float64)
    states, transitions, eps_list = [X], [], []
    for t in range(path.T, 0, -1):
        tr = transition_eval(path, t, X)
        eps = draw_noise(rng, tr.noise_shape()) if (noise and tr.stochastic) else None
        X = tr.sample(eps)
        if not np.all(np.isfinite(X)):
            raise NumericError(f"path state diverged at t={t}")
        states.append(X)
        transitions.append(tr)
        eps_list.append(eps)
    return PathTrace(states, transitions, eps_list, seed, noise)


def path_logits(path: ProbabilityPath, X, noise: bool = False, seed: int = 0) -> np.ndarray:
    trace = simulate_path(path, path.embed(X), noise=noise, seed=seed)
    with tn.no_grad():
        return path.head(trace.states[-1]).data


def layer_correlations(path: ProbabilityPath, X, noise: bool, seed: int = 0) -> list[float]:
    """Pearson correlation between each path state and the backbone's deterministic features.

    Entry ``j`` compares ``X_{T-1-j}`` of a (possibly stochastic) path trace with
    the noise-free post-attention residual ``Z`` of backbone block ``j``.
    """
    from .backbone import backbone_forward

    with tn.no_grad():
        _, _, ref = backbone_forward(path.backbone, X, noise=False)
    trace = simulate_path(path, path.embed(X), noise=noise, seed=seed)
    out = []
    for j, Z in enumerate(ref.Z):
        a = trace.states[j + 1].reshape(-1)
        b = Z.reshape(-1)
        out.append(float(np.corrcoef(a, b)[0, 1]))
    return out


def save_trace(trace: PathTrace, file, config_hash: str = "") -> None:
    arrays = {f"state_{i}": s for i, s in enumerate(trace.states)}
    arrays.update({f"mean_t{tr.t}": tr.mean for tr in trace.transitions})
    arrays.update({f"rownorm_t{tr.t}": tr.row_norms() for tr in trace.transitions})
    save_checkpoint(file, arrays, seed=trace.seed, config_hash=config_hash,
                    sections={"trace": {"seed": trace.seed, "noise": trace.noise, "t": trace.ts}})


def load_trace_arrays(file) -> tuple[dict[str, np.ndarray], dict]:
    arrays, header = load_checkpoint(file)
    return arrays, header["sections"]["trace"]


__all__ = ["GaussianTransition", "ProbabilityPath", "PathTrace", "repartition",
           "transition_eval", "simulate_path", "path_logits", "layer_correlations",
           "save_trace", "load_trace_arrays"]


