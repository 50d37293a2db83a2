"""Single-file checkpoints (safetensors) with config and stage tag in the header."""

from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors.torch import load_file, safe_open, save_file

from .adapters import LoraConfig, attach_lora, attached_adapters
from .model import ModelConfig, VisionLM

LORA_NAMESPACE = ".lora."
META_KEY = "mvlm"  # safetensors writes header maps in arbitrary order; one key keeps bytes stable


def _metadata(model: VisionLM, stage: str, extra: dict | None = None) -> dict:
    meta = {"model_config": json.dumps(model.config.to_dict(), sort_keys=True), "stage": stage}
    adapters = attached_adapters(model)
    if adapters:
        cfg = next(iter(adapters.values())).config
        meta["lora_config"] = json.dumps(cfg.to_dict(), sort_keys=True)
        meta["lora_targets"] = json.dumps(sorted(adapters))
    for k, v in (extra or {}).items():
        meta[k] = str(v)
    return meta


def _pack(meta: dict) -> dict:
    return {META_KEY: json.dumps(meta, sort_keys=True)}


def _contiguous(tensors: dict) -> dict:
    return {k: v.detach().contiguous().clone() for k, v in sorted(tensors.items())}


def save_checkpoint(model: VisionLM, path, stage: str, extra: dict | None = None) -> Path:
    """Write every parameter (adapters included, under ``*.lora.*``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(_contiguous(dict(model.named_parameters())), str(path), metadata=_pack(_metadata(model, stage, extra)))
    return path


def save_adapters(model: VisionLM, path) -> Path:
    path = Path(path)
    tensors = {k: v for k, v in model.named_parameters() if LORA_NAMESPACE in k}
    if not tensors:
        raise ValueError("model has no attached adapters")
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = _metadata(model, "adapters")
    del meta["model_config"]
    save_file(_contiguous(tensors), str(path), metadata=_pack(meta))
    return path


def read_metadata(path) -> dict:
    with safe_open(str(path), framework="pt") as f:
        meta = dict(f.metadata() or {})
    return json.loads(meta[META_KEY]) if META_KEY in meta else meta


def _restore_adapters(model: VisionLM, meta: dict):
    if "lora_config" not in meta:
        return
    cfg = LoraConfig(**json.loads(meta["lora_config"]))
    attach_lora(model, cfg)
    expected = set(json.loads(meta["lora_targets"]))
    got = set(attached_adapters(model))
    if expected != got:
        raise ValueError(f"adapter targets in file {sorted(expected)} do not match model {sorted(got)}")


def load_checkpoint(path) -> tuple[VisionLM, str]:
    """Rebuild a model (with adapters if present) from ``path``; returns (model, stage)."""
    meta = read_metadata(path)
    model = VisionLM(ModelConfig.from_dict(json.loads(meta["model_config"])))
    _restore_adapters(model, meta)
    tensors = load_file(str(path))
    model = model.to(next(iter(tensors.values())).dtype)
    model.load_state_dict(tensors, strict=True)
    return model, meta["stage"]


def load_adapters(model: VisionLM, path) -> VisionLM:
    """Attach the adapters stored in ``path`` to a base model and load their weights."""
    meta = read_metadata(path)
    _restore_adapters(model, meta)
    tensors = load_file(str(path))
    params = dict(model.named_parameters())
    with torch.no_grad():
        for k, v in tensors.items():
            params[k].copy_(v)
    return model
