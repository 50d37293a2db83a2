"""Toy modular vision-language model.

A frozen patch-based vision encoder feeds a Q-Former whose learned query
tokens cross-attend over the patch features. The query outputs are mapped
into the language model's embedding space by one affine projection and
prepended to the embedded prompt of a small frozen causal LM.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    h_img: int = 32
    num_query_tokens: int = 32
    h_q: int = 32
    h_v: int = 32
    h_l: int = 48
    n_layers_vit: int = 2
    n_layers_qformer: int = 2
    n_layers_lm: int = 2
    n_heads: int = 4
    vocab_size: int = 259
    max_target_len: int = 128
    max_positions: int = 512
    ffn_mult: int = 2

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.num_query_tokens <= 0:
            raise ValueError("num_query_tokens must be > 0")
        for name in ("h_img", "h_q", "h_v", "h_l", "vocab_size", "n_heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("h_img", "h_q", "h_l"):
            if getattr(self, name) % self.n_heads:
                raise ValueError(f"{name} must be divisible by n_heads={self.n_heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PatchSequence:
    embeddings: torch.Tensor  # (num_patches, h_img)
    source_image_id: Optional[str] = None


@dataclass
class VisualTokenSet:
    tokens: torch.Tensor  # (k * num_query_tokens, h_l)
    image_ids: list = field(default_factory=list)


@dataclass
class LMInput:
    """Embedded LM input plus the bookkeeping needed to score a target."""

    embeds: torch.Tensor  # (seq, h_l)
    num_visual: int
    prompt_ids: list

    def __len__(self):
        return self.embeds.shape[0]


class AdaptableLinear(nn.Linear):
    """nn.Linear that can carry a low-rank adapter under ``.lora``."""

    def __init__(self, in_features, out_features, bias=True):
        super().__init__(in_features, out_features, bias=bias)
        self.lora = None

    def forward(self, x):
        out = F.linear(x, self.weight, self.bias)
        if self.lora is not None:
            out = out + self.lora(x)
        return out


class Attention(nn.Module):
    def __init__(self, dim, n_heads, kv_dim=None, bias=True):
        super().__init__()
        kv_dim = dim if kv_dim is None else kv_dim
        self.n_heads = n_heads
        self.q_proj = AdaptableLinear(dim, dim, bias=bias)
        self.k_proj = AdaptableLinear(kv_dim, dim, bias=bias)
        self.v_proj = AdaptableLinear(kv_dim, dim, bias=bias)
        self.o_proj = AdaptableLinear(dim, dim, bias=bias)

    def forward(self, x, context=None, causal=False):
        context = x if context is None else context
        *lead, n, d = x.shape
        m = context.shape[-2]
        hd = d // self.n_heads
        q = self.q_proj(x).view(*lead, n, self.n_heads, hd).transpose(-3, -2)
        k = self.k_proj(context).view(*lead, m, self.n_heads, hd).transpose(-3, -2)
        v = self.v_proj(context).view(*lead, m, self.n_heads, hd).transpose(-3, -2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if causal:
            mask = torch.ones(n, m, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        out = scores.softmax(-1) @ v
        out = out.transpose(-3, -2).reshape(*lead, n, d)
        return self.o_proj(out)


class MLP(nn.Module):
    def __init__(self, dim, hidden, bias=True):
        super().__init__()
        self.up_proj = AdaptableLinear(dim, hidden, bias=bias)
        self.down_proj = AdaptableLinear(hidden, dim, bias=bias)

    def forward(self, x):
        return self.down_proj(F.gelu(self.up_proj(x)))


class EncoderBlock(nn.Module):
    """Pre-LN transformer block without positional information."""

    def __init__(self, dim, n_heads, ffn_mult):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, dim * ffn_mult)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class VisionEncoder(nn.Module):
    # No position embeddings: identical patches must map to identical rows.
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.h_img)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.h_img, cfg.n_heads, cfg.ffn_mult) for _ in range(cfg.n_layers_vit)
        )

    def patchify(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) -> (B, num_patches, 3*p*p), patches row-major, each flattened (p, p, 3)."""
        b, h, w, c = pixels.shape
        p = self.cfg.patch_size
        g = h // p
        x = pixels.reshape(b, g, p, g, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * c)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(self.patchify(pixels))
        for block in self.blocks:
            x = block(x)
        return x


class QFormerLayer(nn.Module):
    """Post-LN layer: query self-attention, cross-attention to patches, FFN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = Attention(cfg.h_q, cfg.n_heads)
        self.ln_self = nn.LayerNorm(cfg.h_q)
        self.cross_attn = Attention(cfg.h_q, cfg.n_heads, kv_dim=cfg.h_img)
        self.ln_cross = nn.LayerNorm(cfg.h_q)
        self.mlp = MLP(cfg.h_q, cfg.h_q * cfg.ffn_mult)
        self.ln_out = nn.LayerNorm(cfg.h_q)

    def forward(self, q, patches):
        q = self.ln_self(q + self.self_attn(q))
        q = self.ln_cross(q + self.cross_attn(q, context=patches))
        return self.ln_out(q + self.mlp(q))


class QFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.query_tokens = nn.Parameter(torch.zeros(cfg.num_query_tokens, cfg.h_q))
        self.layers = nn.ModuleList(QFormerLayer(cfg) for _ in range(cfg.n_layers_qformer))
        self.out = nn.Linear(cfg.h_q, cfg.h_v) if cfg.h_q != cfg.h_v else nn.Identity()

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-2] == 0:
            raise ValueError("empty patch sequence: cross-attention has no targets")
        q = self.query_tokens.expand(*patches.shape[:-2], *self.query_tokens.shape)
        for layer in self.layers:
            q = layer(q, patches)
        return self.out(q)


class LMBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.h_l)
        self.attn = Attention(cfg.h_l, cfg.n_heads, bias=False)
        self.ln2 = nn.LayerNorm(cfg.h_l)
        self.mlp = MLP(cfg.h_l, cfg.h_l * cfg.ffn_mult, bias=False)

    def forward(self, x):
        x = x + self.attn(self.ln1(x), causal=True)
        return x + self.mlp(self.ln2(x))


class CausalLM(nn.Module):
    """Decoder-only LM; the output head is tied to the token embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed_tokens = nn.Embedding(cfg.vocab_size, cfg.h_l)
        self.embed_positions = nn.Embedding(cfg.max_positions, cfg.h_l)
        self.blocks = nn.ModuleList(LMBlock(cfg) for _ in range(cfg.n_layers_lm))
        self.ln_f = nn.LayerNorm(cfg.h_l)

    def forward(self, embeds: torch.Tensor) -> torch.Tensor:
        n = embeds.shape[-2]
        if n > self.embed_positions.num_embeddings:
            raise ValueError(f"sequence length {n} exceeds max_positions")
        x = embeds + self.embed_positions.weight[:n]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x) @ self.embed_tokens.weight.T


class VisionLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.vision = VisionEncoder(cfg)
        self.ln_vision = nn.LayerNorm(cfg.h_img)
        self.qformer = QFormer(cfg)
        self.proj = nn.Linear(cfg.h_v, cfg.h_l)
        self.lm = CausalLM(cfg)

    def encode_pixels(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) pixel batch -> (B, num_query_tokens, h_l) visual tokens."""
        feats = self.ln_vision(self.vision(pixels))
        return self.proj(self.qformer(feats))

    @property
    def dtype(self):
        return self.proj.weight.dtype


def init_weights(model: nn.Module, seed: int = 0) -> nn.Module:
    """Seeded initialization, independent of the global torch RNG.

    Linear weights, position embeddings and query tokens ~ N(0, 0.02^2);
    token embeddings ~ N(0, 0.3^2) so the tied output head can express peaked
    distributions; biases zero (the projection bias starts at zero);
    LayerNorm at identity.
    """
    gen = torch.Generator().manual_seed(seed)

    def normal_(p, std=0.02):
        p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)

    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, CausalLM):
                normal_(module.embed_tokens.weight, 0.3)
                normal_(module.embed_positions.weight)
            elif isinstance(module, nn.Linear):
                normal_(module.weight)
                if getattr(module, "bias", None) is not None:
                    module.bias.zero_()
            elif isinstance(module, QFormer):
                normal_(module.query_tokens)
    return model


def build_model(cfg: Optional[ModelConfig] = None, seed: int = 0) -> VisionLM:
    cfg = cfg or ModelConfig()
    return init_weights(VisionLM(cfg), seed)


def _as_pixels(image, cfg: ModelConfig, dtype) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image), dtype=dtype)
    if x.ndim != 3 or x.shape != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(
            f"expected image of shape ({cfg.image_size}, {cfg.image_size}, 3), got {tuple(x.shape)}"
        )
    return x


def encode_image(model: VisionLM, image, image_id: Optional[str] = None) -> PatchSequence:
    """Run the frozen vision encoder on one H x W x 3 image."""
    pixels = _as_pixels(image, model.config, model.dtype)
    with torch.no_grad():
        emb = model.vision(pixels[None])[0]
    return PatchSequence(emb, image_id)


def qformer_encode(model: VisionLM, patches: PatchSequence) -> torch.Tensor:
    emb = patches.embeddings
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ValueError("empty patch sequence: cross-attention has no targets")
    if emb.shape[1] != model.config.h_img:
        raise ValueError(f"patch width {emb.shape[1]} != h_img {model.config.h_img}")
    return model.qformer(model.ln_vision(emb))


def project(visual: torch.Tensor, W_P: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise affine map ``visual @ W_P + b`` with W_P of shape (h_v, h_l)."""
    if visual.shape[-1] != W_P.shape[0] or W_P.shape[1] != b.shape[-1]:
        raise ValueError(
            f"shape mismatch: visual {tuple(visual.shape)}, W_P {tuple(W_P.shape)}, b {tuple(b.shape)}"
        )
    return visual @ W_P + b


def encode_images(model: VisionLM, images: Sequence, image_ids: Optional[Sequence] = None) -> VisualTokenSet:
    """Encode each image separately and concatenate their visual tokens in order."""
    if len(images) == 0:
        raise ValueError("encode_images needs at least one image")
    # One forward per image: batched matmuls may reorder reductions, and each
    # block must equal the single-image encoding exactly.
    blocks = [model.encode_pixels(_as_pixels(im, model.config, model.dtype)[None])[0] for im in images]
    return VisualTokenSet(torch.cat(blocks), list(image_ids or []))


def assemble_lm_input(model: VisionLM, visual: VisualTokenSet, prompt_ids: Sequence[int]) -> LMInput:
    _check_ids(prompt_ids, model.config.vocab_size)
    ids = torch.as_tensor(list(prompt_ids), dtype=torch.long)
    prompt = model.lm.embed_tokens(ids)
    embeds = torch.cat([visual.tokens, prompt.to(visual.tokens.dtype)], dim=0)
    return LMInput(embeds, visual.tokens.shape[0], list(prompt_ids))


def _check_ids(ids, vocab_size):
    for t in ids:
        if not 0 <= int(t) < vocab_size:
            raise ValueError(f"token id {t} outside vocabulary of size {vocab_size}")


def truncate_target(target_ids: Sequence[int], max_len: int) -> list:
    target_ids = list(target_ids)
    if len(target_ids) > max_len:
        logger.warning("target of length %d truncated to %d tokens", len(target_ids), max_len)
        target_ids = target_ids[:max_len]
    return target_ids


def sequence_with_target(model: VisionLM, inp: LMInput, target_ids: Sequence[int]):
    """Append the embedded target and return (embeds, labels) for next-token loss.

    ``labels[t]`` is the token predicted from position ``t``; every visual and
    prompt position that does not predict a target token is IGNORE_INDEX.
    """
    target_ids = truncate_target(target_ids, model.config.max_target_len)
    _check_ids(target_ids, model.config.vocab_size)
    tgt = torch.as_tensor(target_ids, dtype=torch.long)
    embeds = torch.cat([inp.embeds, model.lm.embed_tokens(tgt).to(inp.embeds.dtype)], dim=0)
    labels = torch.full((embeds.shape[0],), IGNORE_INDEX, dtype=torch.long)
    start = len(inp) - 1
    if start < 0:
        raise ValueError("cannot score a target without any preceding input position")
    labels[start : start + len(target_ids)] = tgt
    return embeds, labels


def lm_loss(model: VisionLM, inp: LMInput, target_ids: Sequence[int]) -> torch.Tensor:
    """Mean next-token cross-entropy over the target positions only."""
    embeds, labels = sequence_with_target(model, inp, target_ids)
    logits = model.lm(embeds)
    return F.cross_entropy(logits, labels, ignore_index=IGNORE_INDEX)


def batch_loss(model: VisionLM, batch: Sequence[tuple]) -> tuple[torch.Tensor, int]:
    """Summed target cross-entropy and target-token count for a padded batch.

    ``batch`` holds ``(pixels, prompt_ids, target_ids)`` with ``pixels`` of
    shape (k, H, W, 3). Sequences are right-padded; under causal attention
    real positions never see the padding, so no key mask is needed.
    """
    n_imgs = [p.shape[0] for p in batch_pixels(batch)]
    pixels = torch.cat(batch_pixels(batch)).to(model.dtype)
    visual = model.encode_pixels(pixels).reshape(-1, model.config.h_l)
    rows, labels = [], []
    offset = 0
    q = model.config.num_query_tokens
    for k, (_, prompt_ids, target_ids) in zip(n_imgs, batch):
        vis = VisualTokenSet(visual[offset : offset + k * q])
        offset += k * q
        e, lab = sequence_with_target(model, assemble_lm_input(model, vis, prompt_ids), target_ids)
        rows.append(e)
        labels.append(lab)
    width = max(r.shape[0] for r in rows)
    embeds = torch.stack([F.pad(r, (0, 0, 0, width - r.shape[0])) for r in rows])
    lab = torch.stack([F.pad(l, (0, width - l.shape[0]), value=IGNORE_INDEX) for l in labels])
    logits = model.lm(embeds)
    loss = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), lab.reshape(-1), ignore_index=IGNORE_INDEX, reduction="sum"
    )
    return loss, int((lab != IGNORE_INDEX).sum())


def batch_pixels(batch):
    return [torch.as_tensor(np.asarray(p)) for p, _, _ in batch]


def vision_param_names(model: VisionLM) -> list:
    return [n for n, _ in model.named_parameters() if n.startswith(("vision.", "ln_vision."))]


def base_lm_param_names(model: VisionLM) -> list:
    return [n for n, _ in model.named_parameters() if n.startswith("lm.") and ".lora." not in n]


def text_loss(model: VisionLM, texts_ids: Sequence[Sequence[int]], bos_id: int) -> tuple[torch.Tensor, int]:
    """Summed next-token loss of plain token sequences (no visual prefix)."""
    rows = [[bos_id] + list(ids) for ids in texts_ids]
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), 0, dtype=torch.long)
    labels = torch.full((len(rows), width), IGNORE_INDEX, dtype=torch.long)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.as_tensor(r)
        labels[i, : len(r) - 1] = torch.as_tensor(r[1:])
    logits = model.lm(model.lm.embed_tokens(ids).to(model.dtype))
    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
                           ignore_index=IGNORE_INDEX, reduction="sum")
    return loss, int((labels != IGNORE_INDEX).sum())
