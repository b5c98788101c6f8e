"""Toy transformer backbone with standard, kernel, SGPA and KEP attention.

Blocks are stored first-to-last, which is reverse time: ``blocks[0]`` is the
step ``t = T`` and ``blocks[-1]`` produces ``X_0``. Each block is the pre-LN
arrangement ``Z = MHSA(LN(X)) + X``, ``X' = MLP(LN(Z)) + Z``.

Gaussian attention heads return their output as a mean plus a linear noise map.
For head ``h`` and output column ``i`` the head output is::

    F_h[:, k] = mean_h[:, k] + sum_i (G[h, i] @ eps[h, i]) * W_h[i, k]

and the block output projection folds ``W_h`` and ``O_h`` into ``P[h, i, :]``.
The noise ``eps`` has shape ``[batch, heads, columns, rank]`` and is drawn in
C order, one block at a time, so any consumer drawing from the same stream in
the same order reproduces the backbone's samples exactly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConditioningError, NumericError, ParameterizationError, ShapeError, TrainingError
from .optim import LrSchedule, adam_step, init_optim, lr_at, zero_grads
from .rng import make_rng
from .tensor import Tensor

MODES = ("standard", "kernel", "sgpa", "kep")
GP_MODES = ("sgpa", "kep")


@dataclass
class AttentionConfig:
    mode: str = "standard"
    n_heads: int = 4
    d_model: int = 32
    s: int = 8
    fusion: str = "add"
    jitter: float = 1e-6

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def validate(self, n_tokens: int | None = None) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.s < 1:
            raise ValueError("KEP rank s must be >= 1")
        if n_tokens is not None and self.mode == "kep" and self.s > n_tokens:
            raise ValueError(f"KEP rank s={self.s} exceeds sequence length {n_tokens}")
        if self.fusion not in ("add", "cat"):
            raise ValueError(f"unknown fusion {self.fusion!r}")


@dataclass
class BackboneConfig:
    task: str = "toy-vision"
    depth: int = 4
    d_model: int = 32
    n_heads: int = 4
    mode: str = "standard"
    s: int = 8
    fusion: str = "add"
    gp_blocks: int = -1          # GP mode on the last k blocks; -1 means all
    mlp_ratio: int = 4
    n_classes: int = 3
    image_size: int = 8
    patch: int = 2
    vocab_size: int = 2
    seq_len: int = 16
    n_features: int = 2
    eval_samples: int = 1
    init_seed: int = 0

    @property
    def n_tokens(self) -> int:
        if self.task == "toy-vision":
            return (self.image_size // self.patch) ** 2
        if self.task == "toy-text":
            return self.seq_len
        if self.task == "tabular":
            return self.n_features
        raise ValueError(f"unknown task {self.task!r}")

    def block_modes(self) -> list[str]:
        k = self.depth if self.gp_blocks < 0 else min(self.gp_blocks, self.depth)
        return ["standard"] * (self.depth - k) + [self.mode] * k

    def attention(self, mode: str | None = None) -> AttentionConfig:
        return AttentionConfig(mode=mode or self.mode, n_heads=self.n_heads,
                               d_model=self.d_model, s=self.s, fusion=self.fusion)


@dataclass
class AttentionOutput:
    """Block-level attention output: ``mean`` [B,N,d] plus optional noise map."""
    mean: Tensor
    G: Tensor | None = None      # [B, H, c, N, r]
    P: Tensor | None = None      # [H, c, d]

    @property
    def stochastic(self) -> bool:
        return self.G is not None

    def noise_shape(self) -> tuple[int, int, int, int]:
        B, H, c, _, r = self.G.shape
        return (B, H, c, r)

    def apply_noise(self, eps: np.ndarray | Tensor) -> Tensor:
        return self.mean + tn.einsum("bhinj,bhij,hik->bnk", self.G, eps, self.P)


# -- parameter construction ---------------------------------------------------
def _normal(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def init_attention(cfg: AttentionConfig, n_tokens: int, rng) -> dict[str, Tensor]:
    cfg.validate(n_tokens)
    H, d, dh, s, N = cfg.n_heads, cfg.d_model, cfg.d_head, cfg.s, n_tokens
    std = 1.0 / math.sqrt(d)
    p: dict[str, Tensor] = {}
    if cfg.mode == "standard":
        p["wq"] = _normal(rng, (H, d, dh), std)
        p["wk"] = _normal(rng, (H, d, dh), std)
        p["wv"] = _normal(rng, (H, d, dh), std)
    elif cfg.mode in ("kernel", "sgpa"):
        p["wqk"] = _normal(rng, (H, d, dh), 0.5 * std)
        p["wv"] = _normal(rng, (H, d, dh), std)
        if cfg.mode == "sgpa":
            p["s_fac"] = Tensor(np.tile(0.1 * np.eye(N), (H, dh, 1, 1)), requires_grad=True)
    else:
        p["we"] = _normal(rng, (H, d, s), std)
        p["be"] = _zeros((H, s))
        p["wr"] = _normal(rng, (H, d, s), std)
        p["br"] = _zeros((H, s))
        p["lam_raw"] = Tensor(np.full((H, s), math.log(math.e - 1.0)), requires_grad=True)
        p["m_u"] = _normal(rng, (H, s, s), 1.0 / math.sqrt(s))
        p["s_fac"] = Tensor(np.tile(0.1 * np.eye(s), (H, s, 1, 1)), requires_grad=True)
        if cfg.fusion == "add":
            p["w_add"] = _normal(rng, (H, s, dh), 1.0 / math.sqrt(s))
        else:
            eye2 = np.concatenate([np.eye(N), np.eye(N)], axis=1) * 0.5
            p["w_cat1"] = Tensor(np.tile(eye2, (H, 1, 1)) + rng.normal(0, 0.01, (H, N, 2 * N)),
                                 requires_grad=True)
            p["w_cat2"] = _normal(rng, (H, s, dh), 1.0 / math.sqrt(s))
    p["o"] = _normal(rng, (d, H * dh), std)
    return p


def init_backbone(cfg: BackboneConfig, seed: int | None = None) -> "Backbone":
    rng = make_rng(cfg.init_seed if seed is None else seed, "backbone-init")
    d, N = cfg.d_model, cfg.n_tokens
    embed: dict[str, Tensor] = {}
    if cfg.task == "toy-vision":
        embed["w_patch"] = _normal(rng, (cfg.patch * cfg.patch, d), 1.0 / cfg.patch)
        embed["b_patch"] = _zeros((d,))
    elif cfg.task == "toy-text":
        embed["tok"] = _normal(rng, (cfg.vocab_size, d), 1.0)
    else:
        embed["w_feat"] = _normal(rng, (cfg.n_features, d), 1.0)
        embed["b_feat"] = _normal(rng, (cfg.n_features, d), 0.1)
    embed["pos"] = _normal(rng, (N, d), 0.1)

    blocks = []
    hidden = cfg.mlp_ratio * d
    for mode in cfg.block_modes():
        att = cfg.attention(mode)
        blk = {"mode": mode,
               "ln1_g": _ones((d,)), "ln1_b": _zeros((d,)),
               "ln2_g": _ones((d,)), "ln2_b": _zeros((d,)),
               "w1": _normal(rng, (d, hidden), 1.0 / math.sqrt(d)), "b1": _zeros((hidden,)),
               "w2": _normal(rng, (hidden, d), 1.0 / math.sqrt(hidden)), "b2": _zeros((d,))}
        blk.update(init_attention(att, N, rng))
        blocks.append(blk)
    head = {"ln_g": _ones((d,)), "ln_b": _zeros((d,)),
            "w": _normal(rng, (d, cfg.n_classes), 1.0 / math.sqrt(d)),
            "b": _zeros((cfg.n_classes,))}
    return Backbone(cfg, embed, blocks, head)


@dataclass
class Backbone:
    config: BackboneConfig
    embed_params: dict[str, Tensor]
    blocks: list[dict]
    head_params: dict[str, Tensor]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": v for k, v in self.embed_params.items()}
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.items() if k != "mode"})
        out.update({f"head.{k}": v for k, v in self.head_params.items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    # -- pieces shared with the probability path --------------------------------
    def embed(self, X) -> Tensor:
        return embed(self, X)

    def head(self, X0: Tensor) -> Tensor:
        hp = self.head_params
        pooled = tn.layer_norm(X0, hp["ln_g"], hp["ln_b"]).mean(axis=1)
        return pooled @ hp["w"] + hp["b"]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    n, H, W = images.shape
    g = H // patch
    x = images.reshape(n, g, patch, g, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(n, g * g, patch * patch)


def embed(model: Backbone, X) -> Tensor:
    cfg, ep = model.config, model.embed_params
    X = np.asarray(X)
    if cfg.task == "toy-vision":
        tokens = Tensor(patchify(X.astype(np.float64), cfg.patch))
        return tokens @ ep["w_patch"] + ep["b_patch"] + ep["pos"]
    if cfg.task == "toy-text":
        return tn.getitem(ep["tok"], X.astype(np.int64)) + ep["pos"]
    feats = Tensor(X.astype(np.float64)[:, :, None])
    return feats * ep["w_feat"] + ep["b_feat"] + ep["pos"]


def mlp(blk: dict, X: Tensor) -> Tensor:
    h = tn.gelu(X @ blk["w1"] + blk["b1"])
    return h @ blk["w2"] + blk["b2"]


# -- attention mechanisms --------------------------------------------------------
def _heads(U: Tensor, w: Tensor) -> Tensor:
    """[B,N,d] x [H,d,e] -> [B,H,N,e]."""
    B, N, d = U.shape
    return U.reshape(B, 1, N, d) @ w


def _merge_heads(F: Tensor, o: Tensor) -> Tensor:
    """[B,H,N,dh] -> concatenate heads -> project by O [d, H*dh]."""
    B, H, N, dh = F.shape
    return F.transpose(0, 2, 1, 3).reshape(B, N, H * dh) @ o.T


def _projection(o: Tensor, W: Tensor) -> Tensor:
    """Fold per-head column map W [H,c,dh] into O: P[h] = W[h] @ O_h^T -> [H,c,d]."""
    d, Hdh = o.shape
    H = W.shape[0]
    o_heads = o.reshape(d, H, Hdh // H).transpose(1, 2, 0)   # [H, dh, d]
    return W @ o_heads


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    dh = Q.shape[-1]
    A = tn.softmax((Q @ K.T) * (1.0 / math.sqrt(dh)), axis=-1)
    return A @ V


def mhsa_forward(blk: dict, U: Tensor) -> Tensor:
    """Standard multi-head self-attention on ``U`` [B,N,d] (or [N,d])."""
    squeeze = U.ndim == 2
    if squeeze:
        U = U.reshape(1, *U.shape)
    F = scaled_dot_attention(_heads(U, blk["wq"]), _heads(U, blk["wk"]), _heads(U, blk["wv"]))
    R = _merge_heads(F, blk["o"])
    return R.reshape(R.shape[1:]) if squeeze else R


def exp_dot_kernel(Q: Tensor) -> Tensor:
    """Symmetric kernel ``exp(q_i . q_j / sqrt(dh))`` on the rows of ``Q``."""
    dh = Q.shape[-1]
    return tn.exp((Q @ Q.T) * (1.0 / math.sqrt(dh)))


def kernel_attention_forward(K: Tensor, V: Tensor) -> Tensor:
    """``F = K V`` for a precomputed kernel matrix ``K`` (rows: queries)."""
    if not np.all(np.isfinite(K.data)):
        raise NumericError("kernel attention: non-finite kernel value")
    return K @ V


def sgpa_posterior(K_qq: Tensor, K_qk: Tensor, K_kk: Tensor, V: Tensor, S: Tensor,
                   jitter: float = 1e-6):
    """Posterior mean and per-column covariance of sparse GP attention.

    ``K_*`` are ``[..., N, N]``, ``V`` is ``[..., N, c]`` and ``S`` holds one
    variational covariance per output column, ``[..., c, N, N]``. Returns
    ``mu`` [..., N, c] and ``Sigma`` [..., c, N, N] with
    ``Sigma_i = K_qq + K_qk (K_kk^-1 S_i K_kk^-1 - K_kk^-1) K_kq``.
    """
    N = K_kk.shape[-1]
    K_kk_j = K_kk + jitter * np.eye(N)
    try:
        np.linalg.cholesky(K_kk_j.data)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("K_kk is not positive definite after jitter") from exc
    A = K_qk @ tn.inv(K_kk_j)                            # K_qk K_kk^-1
    mu = K_qk @ V
    A4 = tn.reshape(A, A.shape[:-2] + (1,) + A.shape[-2:])
    schur = K_qq - A @ K_qk.T
    schur4 = tn.reshape(schur, schur.shape[:-2] + (1,) + schur.shape[-2:])
    Sigma = A4 @ S @ A4.T + schur4
    return mu, Sigma


def kep_posterior(E: Tensor, R: Tensor, lam: Tensor, m_u: Tensor, S_fac: Tensor):
    """Closed-form KEP posteriors for both eigen-branches.

    ``E``, ``R``: [..., N, s]; ``lam``: [..., s] (strictly positive);
    ``m_u``: [..., s, s]; ``S_fac``: [..., s, s, s] with ``S_uu[i] = S_fac[i] S_fac[i]^T``.

    Returns ``(mean_e, factor_e), (mean_r, factor_r)`` where means are
    [..., N, s] and factors [..., s, N, s]; column ``i`` of a branch has
    covariance ``factor[i] @ factor[i]^T = E Lam^-2 S_uu[i] E^T``.
    """
    if np.any(lam.data <= 0.0):
        raise ParameterizationError("KEP singular values must be strictly positive")
    lam_b = tn.reshape(lam, lam.shape[:-1] + (1, lam.shape[-1]))
    Ei = E / lam_b
    Ri = R / lam_b
    Ei4 = tn.reshape(Ei, Ei.shape[:-2] + (1,) + Ei.shape[-2:])
    Ri4 = tn.reshape(Ri, Ri.shape[:-2] + (1,) + Ri.shape[-2:])
    return (Ei @ m_u, Ei4 @ S_fac), (Ri @ m_u, Ri4 @ S_fac)


def kep_fuse(Fe: Tensor, Fr: Tensor, fusion: str, W: Tensor, W_cat1: Tensor | None = None) -> Tensor:
    """Fuse the two branch outputs [..., N, s] into [..., N, dh].

    ``add``: ``(Fe + Fr) W``; ``cat``: ``W_cat1 [Fe; Fr] W`` with ``W_cat1`` [N, 2N].
    """
    if fusion == "add":
        return (Fe + Fr) @ W
    if fusion == "cat":
        return W_cat1 @ tn.concat([Fe, Fr], axis=-2) @ W
    raise ValueError(f"unknown fusion {fusion!r}")


def attention_forward(blk: dict, cfg: AttentionConfig, U: Tensor) -> AttentionOutput:
    """Attention block output for ``U`` [B,N,d] as mean plus (for GP modes) a noise map."""
    mode = cfg.mode
    if mode == "standard":
        return AttentionOutput(mhsa_forward(blk, U))
    if mode == "kernel":
        Q = _heads(U, blk["wqk"])
        F = kernel_attention_forward(exp_dot_kernel(Q), _heads(U, blk["wv"]))
        return AttentionOutput(_merge_heads(F, blk["o"]))
    if mode == "sgpa":
        Q = _heads(U, blk["wqk"])
        K = exp_dot_kernel(Q)
        S = blk["s_fac"] @ blk["s_fac"].T                     # [H, dh, N, N]
        mu, Sigma = sgpa_posterior(K, K, K, _heads(U, blk["wv"]), S, cfg.jitter)
        N = K.shape[-1]
        sym = (Sigma + Sigma.T) * 0.5
        scale = 1.0 + np.abs(np.diagonal(sym.data, axis1=-2, axis2=-1)).mean()
        G = tn.cholesky(sym + (cfg.jitter * scale) * np.eye(N))   # [B,H,dh,N,N]
        dh = cfg.d_head
        eye = Tensor(np.broadcast_to(np.eye(dh), (cfg.n_heads, dh, dh)))
        return AttentionOutput(_merge_heads(mu, blk["o"]), G, _projection(blk["o"], eye))
    # kep
    E = tn.gelu(_heads(U, blk["we"]) + tn.reshape(blk["be"], (blk["be"].shape[0], 1, -1)))
    R = tn.gelu(_heads(U, blk["wr"]) + tn.reshape(blk["br"], (blk["br"].shape[0], 1, -1)))
    lam = tn.softplus(blk["lam_raw"])
    (Me, Le), (Mr, Lr) = kep_posterior(E, R, lam, blk["m_u"], blk["s_fac"])
    if cfg.fusion == "add":
        W = blk["w_add"]
        mean = kep_fuse(Me, Mr, "add", W)
        G = Le + Lr                                           # shared eps across branches
    else:
        W = blk["w_cat2"]
        W1 = blk["w_cat1"]
        mean = kep_fuse(Me, Mr, "cat", W, W1)
        W1b = tn.reshape(W1, (W1.shape[0], 1) + W1.shape[1:])
        G = W1b @ tn.concat([Le, Lr], axis=-2)                # [B,H,s,N,s]
    return AttentionOutput(_merge_heads(mean, blk["o"]), G, _projection(blk["o"], W))


def draw_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(size=shape)


# -- full forward ---------------------------------------------------------------------
@dataclass
class BackboneTrace:
    """Intermediate features of one forward pass, in reverse time.

    ``X[k]`` is the input of block ``k`` (so ``X[0] = X_T``) and ``X[-1]`` the
    final features; ``Z[k]`` is the post-attention residual of block ``k``.
    """
    X: list[np.ndarray] = field(default_factory=list)
    Z: list[np.ndarray] = field(default_factory=list)


def block_forward(model: Backbone, k: int, X: Tensor, noise: bool, rng) -> tuple[Tensor, Tensor]:
    blk = model.blocks[k]
    att = attention_forward(blk, model.config.attention(blk["mode"]),
                            tn.layer_norm(X, blk["ln1_g"], blk["ln1_b"]))
    if att.stochastic and noise:
        R = att.apply_noise(draw_noise(rng, att.noise_shape()))
    else:
        R = att.mean
    Z = R + X
    return Z, mlp(blk, tn.layer_norm(Z, blk["ln2_g"], blk["ln2_b"])) + Z


def backbone_forward(model: Backbone, X, noise: bool = False, seed: int = 0):
    """Run the backbone; returns ``(logits, X_0, trace)``.

    With ``noise=True`` GP heads draw one reparameterized sample per block
    from the ``(seed, "gp-noise")`` stream; otherwise posterior means are used.
    """
    rng = make_rng(seed, "gp-noise") if noise else None
    H = model.embed(X)
    trace = BackboneTrace(X=[H.data])
    for k in range(model.depth):
        Z, H = block_forward(model, k, H, noise, rng)
        trace.Z.append(Z.data)
        trace.X.append(H.data)
    return model.head(H), H, trace


# -- training -----------------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-3
    min_lr: float = 1e-5
    warmup_epochs: int = 3
    weight_decay: float = 1e-5
    kl_weight: float = 0.0
    seed: int = 0


def kep_prior_kl(model: Backbone) -> Tensor:
    """KL of the KEP variational posteriors from their prior ``N(0, Lambda^2)``, summed."""
    total = Tensor(0.0)
    for blk in model.blocks:
        if blk["mode"] != "kep":
            continue
        lam2 = tn.softplus(blk["lam_raw"]) ** 2                       # [H, s]
        S = blk["s_fac"] @ blk["s_fac"].T                              # [H, i, s, s]
        s = lam2.shape[-1]
        eye = np.eye(s)
        Sd = (S * eye).sum(axis=-1)                                    # diag, [H, i, s]
        lam2b = tn.reshape(lam2, (lam2.shape[0], 1, s))
        trace = (Sd / lam2b).sum()
        m = blk["m_u"].transpose(0, 2, 1)                              # [H, i, s]
        maha = (m * m / lam2b).sum()
        chol = tn.cholesky(S + 1e-10 * eye)
        logdet_S = 2.0 * tn.log((chol * eye).sum(axis=-1)).sum()
        logdet_P = tn.log(lam2b).sum() * float(S.shape[1])
        total = total + 0.5 * (trace + maha - float(S.shape[0] * S.shape[1] * s)
                               + logdet_P - logdet_S)
    return total


def train_backbone(model: Backbone, dataset, config: TrainConfig, log=None) -> Backbone:
    """Minimize cross-entropy on ``dataset`` split ``"train"`` with Adam + warmup/cosine.

    GP-mode backbones see one reparameterized sample per step.
    """
    Xtr, ytr = dataset.split("train")
    params = model.parameters()
    state = init_optim(params, lr=config.lr, weight_decay=config.weight_decay)
    sched = LrSchedule(config.lr, min(config.min_lr, config.lr), config.warmup_epochs,
                       max(config.epochs - config.warmup_epochs, 1))
    stochastic = any(b["mode"] in GP_MODES for b in model.blocks)
    n = len(ytr)
    for epoch in range(config.epochs):
        state.lr = lr_at(sched, epoch)
        order = make_rng(config.seed, "backbone-shuffle", epoch).permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            logits, _, _ = backbone_forward(model, Xtr[idx], noise=stochastic,
                                            seed=_step_seed(config.seed, epoch, step))
            loss = tn.cross_entropy(logits, ytr[idx])
            if config.kl_weight > 0:
                loss = loss + kep_prior_kl(model) * (config.kl_weight / n)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"backbone loss diverged at epoch {epoch}, step {step}")
            zero_grads(params)
            loss.backward()
            if config.lr > 0:
                adam_step(params, state)
            total += loss.item() * len(idx)
        if log is not None:
            log(f"backbone epoch {epoch}: loss {total / n:.4f} lr {state.lr:.2e}")
    zero_grads(params)
    return model


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return int(make_rng(seed, "step-seed", epoch, step).integers(0, 2**31 - 1))


def config_dict(cfg) -> dict:
    return asdict(cfg)
