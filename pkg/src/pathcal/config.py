"""Run configuration as flat ``key = value`` text.

Grammar: one ``section.name = value`` per line, ``#`` starts a comment, blank
lines are ignored. Values are parsed by the declared field type; ``auto`` is
accepted for the loss weights. Unknown keys are rejected.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from typing import get_type_hints

from .backbone import BackboneConfig, TrainConfig
from .distill import DistillConfig, LossWeights
from .kernelnet import KernelConfig


@dataclass(frozen=True)
class RunConfig:
    task: str = "toy-vision"
    seed: int = 0
    data_kind: str = "blobs"
    data_n: int = 600
    data_ood_n: int = 200
    backbone_mode: str = "kep"
    backbone_depth: int = 4
    backbone_d_model: int = 32
    backbone_n_heads: int = 4
    backbone_s: int = 8
    backbone_fusion: str = "add"
    backbone_epochs: int = 10
    backbone_batch_size: int = 64
    backbone_learning_rate: float = 3e-3
    backbone_warmup_epochs: int = 3
    backbone_kl_weight: float = 0.0
    backbone_eval_samples: int = 1
    kernel_n_heads: int = 4
    kernel_mlp_ratio: int = 4
    kernel_residual: bool = True
    kernel_init_scale: float = 0.05
    distill_epochs: int = 30
    distill_batch_size: int = 32
    distill_learning_rate: float = 1e-2
    distill_min_learning_rate: float = 1e-5
    distill_warmup_epochs: int = 2
    distill_cosine_cycle_epochs: int = 30
    distill_weight_decay: float = 1e-5
    distill_beta1: float = 0.9
    distill_beta2: float = 0.999
    distill_lambda_mean: float | None = None
    distill_lambda_cholesky: float | None = None
    distill_lambda_nll: float | None = None
    distill_perf_samples: int = 1
    eval_bins: int = 15
    eval_n_draws: int = 10
    eval_vlb_samples: int = 1000
    ood_method: str = "entropy"

    def __post_init__(self):
        if self.task not in ("toy-vision", "toy-text", "tabular"):
            raise ValueError(f"unknown task {self.task!r}")
        lambdas = (self.distill_lambda_mean, self.distill_lambda_cholesky, self.distill_lambda_nll)
        if any(v is None for v in lambdas) and not all(v is None for v in lambdas):
            raise ValueError("set all three distill.lambda_* values or leave all on auto")

    # -- derived component configs ----------------------------------------------
    def backbone_config(self) -> BackboneConfig:
        n_classes = 2 if self.data_kind in ("moons", "token-parity") else 3
        return BackboneConfig(task=self.task, depth=self.backbone_depth,
                              d_model=self.backbone_d_model, n_heads=self.backbone_n_heads,
                              mode=self.backbone_mode, s=self.backbone_s,
                              fusion=self.backbone_fusion, n_classes=n_classes,
                              eval_samples=self.backbone_eval_samples, init_seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.backbone_epochs, batch_size=self.backbone_batch_size,
                           lr=self.backbone_learning_rate,
                           warmup_epochs=self.backbone_warmup_epochs,
                           kl_weight=self.backbone_kl_weight, seed=self.seed)

    def kernel_config(self) -> KernelConfig:
        bb = self.backbone_config()
        return KernelConfig(T=self.backbone_depth, d_model=self.backbone_d_model,
                            n_heads=self.kernel_n_heads, n_tokens=bb.n_tokens,
                            mlp_ratio=self.kernel_mlp_ratio, residual=self.kernel_residual,
                            init_scale=self.kernel_init_scale, init_seed=self.seed)

    def distill_config(self) -> DistillConfig:
        w = None
        if self.distill_lambda_mean is not None:
            w = LossWeights(self.distill_lambda_mean, self.distill_lambda_cholesky,
                            self.distill_lambda_nll)
        return DistillConfig(epochs=self.distill_epochs, batch_size=self.distill_batch_size,
                             lr=self.distill_learning_rate, min_lr=self.distill_min_learning_rate,
                             warmup_epochs=self.distill_warmup_epochs,
                             cycle_epochs=self.distill_cosine_cycle_epochs,
                             weight_decay=self.distill_weight_decay, beta1=self.distill_beta1,
                             beta2=self.distill_beta2, weights=w,
                             perf_samples=self.distill_perf_samples, seed=self.seed)


_SECTIONS = ("data", "backbone", "kernel", "distill", "eval", "ood")


def _key(attr: str) -> str:
    head, _, rest = attr.partition("_")
    return f"{head}.{rest}" if head in _SECTIONS and rest else attr


def _attr(key: str) -> str:
    return key.replace(".", "_")


def _format(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(raw: str, tp, key: str):
    raw = raw.strip()
    text = str(tp)
    if "None" in text and raw == "auto":
        return None
    if tp is bool:
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"{key}: expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if tp is int:
        return int(raw)
    if tp is float or "float" in text:
        return float(raw)
    return raw


def snapshot(cfg: RunConfig) -> str:
    return "".join(f"{_key(f.name)} = {_format(getattr(cfg, f.name))}\n" for f in fields(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(snapshot(cfg).encode("utf-8")).hexdigest()[:16]


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    hints = get_type_hints(RunConfig)
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        attr = _attr(key)
        if attr not in hints:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        updates[attr] = _parse_value(raw, hints[attr], key)
    return replace(base or RunConfig(), **updates)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), base)
