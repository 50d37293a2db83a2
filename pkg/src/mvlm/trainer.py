"""Training stages: projection warm-up, re-alignment, and per-task fine-tuning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .adapters import LoraConfig, LoraTarget, attach_lora, attached_adapters
from .checkpoint import save_checkpoint
from .model import VisionLM, base_lm_param_names, batch_loss, text_loss, vision_param_names
from .tokenizer import ByteTokenizer

logger = logging.getLogger(__name__)


class Stage(str, Enum):
    WARMUP = "warmup"
    REALIGN = "realign"
    FINETUNE = "finetune"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class StageConfig:
    stage: Stage = Stage.REALIGN
    lr: float = 5e-5
    warmup_steps: int = 1000
    total_steps: int = 60_000
    batch_size: int = 128
    grad_accum: int = 1
    weight_decay: float = 0.1
    max_target_len: int = 128
    lora: Optional[LoraConfig] = field(default_factory=LoraConfig)
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if isinstance(self.lora, dict):
            self.lora = LoraConfig(**self.lora)
        self.betas = tuple(self.betas)
        if self.grad_accum < 1 or self.batch_size % self.grad_accum:
            raise ValueError(f"batch_size {self.batch_size} not divisible by grad_accum {self.grad_accum}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")

    @property
    def micro_batch_size(self) -> int:
        return self.batch_size // self.grad_accum

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        d["lora"] = self.lora.to_dict() if self.lora else None
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d)


# Full-scale settings; toy runs scale the step counts down.
WARMUP_DEFAULTS = StageConfig(stage=Stage.WARMUP, lr=5e-3, warmup_steps=1000, total_steps=8000, lora=None)
REALIGN_DEFAULTS = StageConfig(stage=Stage.REALIGN)


@dataclass(frozen=True)
class FinetunePreset:
    epochs: int
    lr: float
    batch_size: int


FINETUNE_PRESETS = {
    "xgqa": FinetunePreset(5, 5e-5, 256),
    "xvnli": FinetunePreset(10, 1e-5, 128),
    "marvl": FinetunePreset(20, 5e-5, 128),
}


@dataclass(frozen=True)
class AblationPreset:
    name: str
    instruction_mix: bool
    lora_target: LoraTarget
    warm_start: bool


ABLATION_PRESETS = {
    p.name: p
    for p in (
        AblationPreset("captions-only", False, LoraTarget.NONE, True),
        AblationPreset("captions-lora-all", False, LoraTarget.ALL, True),
        AblationPreset("mix-no-lora", True, LoraTarget.NONE, True),
        AblationPreset("mix-lora-qv", True, LoraTarget.QUERY_VALUE, True),
        AblationPreset("mix-lora-all-no-warmstart", True, LoraTarget.ALL, False),
        AblationPreset("full", True, LoraTarget.ALL, True),
    )
}


@dataclass(frozen=True)
class FreezeSet:
    trainable: frozenset


def freeze_policy(model: VisionLM, stage) -> FreezeSet:
    """Names of the parameters a stage may update.

    Warm-up trains only the projection. Re-alignment and fine-tuning train
    the Q-Former (query tokens included), the projection and any attached
    LoRA adapters. The vision encoder and base LM are never trainable.
    """
    stage = Stage(stage)
    names = [n for n, _ in model.named_parameters()]
    if stage is Stage.WARMUP:
        trainable = {n for n in names if n.startswith("proj.")}
    else:
        trainable = {n for n in names if n.startswith(("qformer.", "proj.")) or ".lora." in n}
    frozen = set(vision_param_names(model)) | set(base_lm_param_names(model))
    assert not trainable & frozen
    return FreezeSet(frozenset(trainable))


def apply_freeze(model: VisionLM, freeze: FreezeSet) -> list:
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in freeze.trainable)
        if name in freeze.trainable:
            params.append(p)
    return params


def lr_schedule(step: int, cfg: StageConfig) -> float:
    """Linear warm-up from 0 to ``cfg.lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span if span else 1.0
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- data

class ImageStore(dict):
    """image_id -> float32 array (H, W, 3) in [0, 1]."""

    @classmethod
    def from_npz(cls, path) -> "ImageStore":
        with np.load(path) as z:
            return cls({k: z[k].astype(np.float32) for k in z.files})

    def save_npz(self, path):
        np.savez(path, **{k: self[k] for k in sorted(self)})

    def pixels(self, image_ids) -> np.ndarray:
        try:
            return np.stack([self[i] for i in image_ids])
        except KeyError as exc:
            raise KeyError(f"image {exc.args[0]!r} not found in image store") from None


def encode_examples(examples: Sequence, tokenizer: ByteTokenizer, max_target_len: int) -> list:
    """(image_ids, prompt_ids, target_ids) triples; examples need image_ids/prompt/target."""
    out = []
    for ex in examples:
        target = tokenizer.encode_target(ex.target)
        if len(target) > max_target_len:
            logger.warning("target of %s truncated from %d to %d tokens",
                           getattr(ex, "example_id", "?"), len(target), max_target_len)
            target = target[:max_target_len]
        out.append((list(ex.image_ids), tokenizer.encode(ex.prompt), target))
    return out


def index_stream(n: int, seed: int):
    """Endless example order: a fresh seeded permutation per epoch."""
    if n == 0:
        raise ValueError("training data is empty")
    epoch = 0
    while True:
        yield from np.random.default_rng([seed, epoch]).permutation(n).tolist()
        epoch += 1


@dataclass
class StageResult:
    model: VisionLM
    log: list
    checkpoints: list


def run_stage(model: VisionLM, data: Sequence, images: ImageStore, cfg: StageConfig,
              tokenizer: Optional[ByteTokenizer] = None, log_path=None, checkpoint_dir=None) -> StageResult:
    """Run ``cfg.total_steps`` AdamW updates on the stage's trainable set.

    Each update sees ``cfg.batch_size`` examples in ``cfg.grad_accum``
    micro-batches; every micro-batch loss is summed over target tokens and
    divided by the token count of the whole effective batch, so
    accumulation reproduces the single large batch.
    """
    tokenizer = tokenizer or ByteTokenizer()
    if cfg.stage is not Stage.WARMUP and cfg.lora and cfg.lora.target is not LoraTarget.NONE:
        if not attached_adapters(model):
            attach_lora(model, cfg.lora, seed=cfg.seed)
    params = apply_freeze(model, freeze_policy(model, cfg.stage))
    encoded = encode_examples(data, tokenizer, cfg.max_target_len)
    optim = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    order = index_stream(len(encoded), cfg.seed)
    log, ckpts = [], []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    model.train()
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            for step in range(cfg.total_steps):
                lr = lr_schedule(step, cfg)
                for group in optim.param_groups:
                    group["lr"] = lr
                batch = [encoded[next(order)] for _ in range(cfg.batch_size)]
                n_tokens = sum(len(t) for _, _, t in batch)
                optim.zero_grad(set_to_none=True)
                total = 0.0
                for k in range(cfg.grad_accum):
                    micro = batch[k * cfg.micro_batch_size : (k + 1) * cfg.micro_batch_size]
                    rows = [(images.pixels(ids), p, t) for ids, p, t in micro]
                    loss_sum, _ = batch_loss(model, rows)
                    loss = loss_sum / n_tokens
                    if not torch.isfinite(loss):
                        raise TrainingDiverged(step + 1, float(loss.detach()))
                    loss.backward()
                    total += float(loss.detach())
                optim.step()
                rec = {"step": step + 1, "loss": total, "lr": lr}
                log.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if checkpoint_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                    path = Path(checkpoint_dir) / checkpoint_name(cfg.stage, step + 1)
                    ckpts.append(save_checkpoint(model, path, cfg.stage.value, {"step": step + 1}))
    finally:
        if log_fh:
            log_fh.close()
        model.eval()
    return StageResult(model, log, ckpts)


def checkpoint_name(stage, step: int) -> str:
    return f"{Stage(stage).value}-step{step:07d}.safetensors"


def pretrain_lm(model: VisionLM, texts: Sequence[str], steps: int = 200, batch_size: int = 16,
                lr: float = 3e-3, seed: int = 0, tokenizer: Optional[ByteTokenizer] = None) -> list:
    """Give the toy LM some language before it is frozen.

    Stand-in for loading a pretrained LM checkpoint: trains only the LM on
    plain text. Every later stage keeps these weights frozen.
    """
    tokenizer = tokenizer or ByteTokenizer()
    encoded = [tokenizer.encode_target(t) for t in texts]
    params = [p for n, p in model.named_parameters() if n.startswith("lm.")]
    for n, p in model.named_parameters():
        p.requires_grad_(n.startswith("lm."))
    optim = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    order = index_stream(len(encoded), seed)
    losses = []
    model.train()
    for step in range(steps):
        batch = [encoded[next(order)] for _ in range(batch_size)]
        optim.param_groups[0]["lr"] = lr * 0.5 * (1 + math.cos(math.pi * step / steps))
        loss_sum, n = text_loss(model, batch, tokenizer.bos_id)
        loss = loss_sum / n
        optim.zero_grad(set_to_none=True)
        loss.backward()
        optim.step()
        losses.append(float(loss.detach()))
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return losses


# ---------------------------------------------------------------- alignment

def scaled(cfg: StageConfig, **overrides) -> StageConfig:
    return replace(cfg, **overrides)


def run_alignment(model: VisionLM, mix: Sequence, images: ImageStore, preset: AblationPreset,
                  warmup_cfg: StageConfig, realign_cfg: StageConfig, out_dir=None) -> dict:
    """Optional projection warm-up, then re-alignment, following an ablation preset.

    Without the instruction mix the stream is the web-caption subset alone.
    The warm-up always trains on caption examples.
    """
    out_dir = Path(out_dir) if out_dir else None
    stream = list(mix) if preset.instruction_mix else [ex for ex in mix if ex.dataset == "capfilt"]
    if not stream:
        raise ValueError(f"preset {preset.name!r} leaves no training examples")
    results = {}
    if preset.warm_start:
        captions = [ex for ex in stream if ex.task == "caption"] or stream
        results["warmup"] = run_stage(
            model, captions, images, scaled(warmup_cfg, stage=Stage.WARMUP, lora=None),
            log_path=out_dir / "warmup_metrics.jsonl" if out_dir else None,
            checkpoint_dir=out_dir,
        )
    lora = None if preset.lora_target is LoraTarget.NONE else replace(
        realign_cfg.lora or LoraConfig(), target=preset.lora_target)
    results["realign"] = run_stage(
        model, stream, images, scaled(realign_cfg, stage=Stage.REALIGN, lora=lora),
        log_path=out_dir / "realign_metrics.jsonl" if out_dir else None,
        checkpoint_dir=out_dir,
    )
    return results


# ---------------------------------------------------------------- fine-tuning

def finetune_config(task: str, n_examples: int, micro_batch_size: int = 8, seed: int = 0,
                    lora: Optional[LoraConfig] = None, max_steps: Optional[int] = None) -> StageConfig:
    """Stage config for ``task``: the preset's epochs, lr and effective batch size."""
    try:
        preset = FINETUNE_PRESETS[task]
    except KeyError:
        raise ValueError(f"no fine-tuning preset for task {task!r}") from None
    if preset.batch_size % micro_batch_size:
        raise ValueError(f"micro batch {micro_batch_size} does not divide batch {preset.batch_size}")
    steps = max(1, math.ceil(preset.epochs * n_examples / preset.batch_size))
    if max_steps is not None:
        steps = min(steps, max_steps)
    return StageConfig(
        stage=Stage.FINETUNE,
        lr=preset.lr,
        warmup_steps=min(REALIGN_DEFAULTS.warmup_steps, steps // 10),
        total_steps=steps,
        batch_size=preset.batch_size,
        grad_accum=preset.batch_size // micro_batch_size,
        lora=lora or LoraConfig(),
        seed=seed,
    )


def finetune(model: VisionLM, task: str, data: Sequence, images: ImageStore, seed: int = 0,
             micro_batch_size: int = 8, max_steps: Optional[int] = None, **kw) -> StageResult:
    """Fine-tune on English task data with a fresh LoRA.

    Adapters from re-alignment must have been merged beforehand.
    """
    if attached_adapters(model):
        raise ValueError("unmerged LoRA adapters present; merge them before fine-tuning")
    cfg = finetune_config(task, len(data), micro_batch_size, seed, max_steps=max_steps)
    return run_stage(model, data, images, cfg, **kw)


def finetune_seeds(make_model: Callable[[], VisionLM], task: str, data: Sequence, images: ImageStore,
                   score: Callable[[VisionLM], float], seeds=(0, 1, 2), **kw) -> dict:
    """Fine-tune once per seed from fresh copies; report each score and their mean."""
    scores = []
    for s in seeds:
        result = finetune(make_model(), task, data, images, seed=s, **kw)
        scores.append(float(score(result.model)))
    return {"seeds": list(seeds), "scores": scores, "mean": sum(scores) / len(scores)}


def select_checkpoint(checkpoints: Sequence, english_val_scores: Sequence[float]):
    """Checkpoint with the best English validation score; earliest wins ties."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if len(checkpoints) != len(english_val_scores):
        raise ValueError("need exactly one English validation score per checkpoint")
    best = max(range(len(checkpoints)), key=lambda i: (english_val_scores[i], -i))
    return checkpoints[best]
