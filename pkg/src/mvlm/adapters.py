"""Low-rank adapters for the language model's weight matrices."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import AdaptableLinear, VisionLM


class LoraTarget(str, Enum):
    NONE = "none"
    QUERY_VALUE = "query_value"
    ALL = "all_lm_matrices"


@dataclass(frozen=True)
class LoraConfig:
    r: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    target: LoraTarget = LoraTarget.ALL
    init_std: float = 0.02

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {self.r}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"LoRA dropout must be in [0, 1), got {self.dropout}")
        object.__setattr__(self, "target", LoraTarget(self.target))

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target"] = self.target.value
        return d


class LoraAdapter(nn.Module):
    """Holds A (r x d_in) and B (d_out x r) for one base matrix."""

    def __init__(self, base_matrix_name: str, d_in: int, d_out: int, config: LoraConfig):
        super().__init__()
        self.base_matrix_name = base_matrix_name
        self.config = config
        self.A = nn.Parameter(torch.zeros(config.r, d_in))
        self.B = nn.Parameter(torch.zeros(d_out, config.r))
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x):
        return self.config.scaling * F.linear(F.linear(self.dropout(x), self.A), self.B)

    def delta(self) -> torch.Tensor:
        return self.config.scaling * (self.B @ self.A)


def lora_forward(x, W, adapter: LoraAdapter, training: bool = False):
    """``W x + (alpha/r) B A dropout(x)``; dropout only when ``training``."""
    A, B = adapter.A, adapter.B
    if A.shape[1] != W.shape[1] or B.shape[0] != W.shape[0] or A.shape[0] != B.shape[1]:
        raise ValueError(
            f"rank/shape mismatch: W {tuple(W.shape)}, A {tuple(A.shape)}, B {tuple(B.shape)}"
        )
    h = F.dropout(x, adapter.config.dropout, training=training)
    return F.linear(x, W) + adapter.config.scaling * F.linear(F.linear(h, A), B)


def target_matrices(model: VisionLM, target: LoraTarget) -> dict:
    """Name -> AdaptableLinear for the LM matrices selected by ``target``.

    "All" covers every attention and feed-forward matrix of the LM; the
    (tied) token embedding, position embedding and LayerNorms are excluded.
    """
    target = LoraTarget(target)
    if target is LoraTarget.NONE:
        return {}
    out = {}
    for name, mod in model.lm.named_modules():
        if not isinstance(mod, AdaptableLinear):
            continue
        if target is LoraTarget.QUERY_VALUE and not name.endswith(("attn.q_proj", "attn.v_proj")):
            continue
        out[f"lm.{name}.weight"] = mod
    return out


def attached_adapters(model: VisionLM) -> dict:
    return {
        f"lm.{name}": mod.lora
        for name, mod in model.lm.named_modules()
        if isinstance(mod, AdaptableLinear) and mod.lora is not None
    }


def attach_lora(model: VisionLM, config: LoraConfig, seed: int = 0) -> list:
    """Wrap the configured LM matrices with fresh adapters (B = 0)."""
    targets = target_matrices(model, config.target)
    for name, mod in targets.items():
        if mod.lora is not None:
            raise ValueError(f"an adapter is already attached to {name}")
    gen = torch.Generator().manual_seed(seed)
    adapters = []
    for name, mod in targets.items():
        ad = LoraAdapter(name, mod.in_features, mod.out_features, config).to(mod.weight.dtype)
        with torch.no_grad():
            ad.A.copy_(torch.randn(ad.A.shape, generator=gen, dtype=ad.A.dtype) * config.init_std)
        ad.train(model.training)
        mod.lora = ad
        adapters.append(ad)
    return adapters


def merge_lora(model: VisionLM) -> VisionLM:
    """Fold every attached adapter into its base matrix and detach it."""
    adapters = attached_adapters(model)
    if not adapters:
        raise ValueError("no LoRA adapters attached (already merged?)")
    with torch.no_grad():
        for mod in model.lm.modules():
            if isinstance(mod, AdaptableLinear) and mod.lora is not None:
                mod.weight.add_(mod.lora.delta().to(mod.weight.dtype))
                mod.lora = None
    return model


def lora_param_count(model: VisionLM) -> int:
    return sum(p.numel() for ad in attached_adapters(model).values() for p in ad.parameters())
