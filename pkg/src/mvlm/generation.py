"""Beam-search decoding with length and repetition penalties.

The search runs against any ``next_logits(prefixes) -> (n, vocab)`` callable,
so the same code decodes the vision-LM and small hand-built test LMs.
Hypothesis score is ``sum(log p) / len(y) ** length_penalty`` where ``y``
includes the end token when one was produced.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .model import VisionLM, assemble_lm_input, encode_images
from .tokenizer import EOS_ID, ByteTokenizer


@dataclass(frozen=True)
class GenConfig:
    beam_width: int = 5
    length_penalty: float = 1.0
    repetition_penalty: float = 1.0
    max_len: int = 32

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.repetition_penalty < 1:
            raise ValueError("repetition_penalty must be >= 1")

    @classmethod
    def for_task(cls, classification: bool, **kw) -> "GenConfig":
        """Short answers for classification-style tasks (length penalty -1)."""
        return cls(length_penalty=-1.0 if classification else 1.0, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Hypothesis:
    tokens: tuple
    logprob: float
    score: float
    truncated: bool = False


@dataclass
class BeamResult:
    tokens: tuple
    score: float
    truncated: bool
    hypotheses: list = field(default_factory=list)


def apply_repetition_penalty(logits: np.ndarray, generated: Sequence[int], penalty: float) -> np.ndarray:
    """Shrink the logits of already generated tokens: divide positive, multiply negative."""
    if penalty == 1.0 or not generated:
        return logits
    out = logits.copy()
    idx = np.fromiter(set(generated), dtype=np.int64)
    vals = out[idx]
    out[idx] = np.where(vals < 0, vals * penalty, vals / penalty)
    return out


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max()
    z = x - m
    return z - np.log(np.exp(z).sum())


def length_normalize(logprob: float, length: int, alpha: float) -> float:
    return logprob / (length ** alpha)


def beam_search(next_logits: Callable, cfg: GenConfig, eos_id: int = EOS_ID) -> BeamResult:
    """Deterministic beam search.

    Candidates are ranked by cumulative log-prob, ties going to the lower
    token sequence. A candidate ending in ``eos_id`` is finalized only if it
    ranks inside the top ``beam_width``, and only the ``beam_width`` best
    finalized hypotheses are kept. Search stops when that pool is full and
    no live beam, scored at its current length, would beat its worst entry,
    or after ``max_len`` tokens, when surviving beams are finalized as
    truncated.
    """
    live = [((), 0.0)]
    finished = []  # (hypothesis, completion order)
    order = 0
    for _ in range(cfg.max_len):
        logits = np.asarray(next_logits([toks for toks, _ in live]), dtype=np.float64)
        cands = []
        for row, (toks, lp) in zip(logits, live):
            logp = log_softmax(apply_repetition_penalty(row, toks, cfg.repetition_penalty))
            cands.extend((lp + float(logp[v]), toks + (v,)) for v in range(logp.shape[0]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for rank, (lp, toks) in enumerate(cands):
            if toks[-1] == eos_id:
                if rank < cfg.beam_width:
                    hyp = Hypothesis(toks, lp, length_normalize(lp, len(toks), cfg.length_penalty))
                    finished.append((hyp, order))
                    order += 1
                continue
            live.append((toks, lp))
            if len(live) == cfg.beam_width:
                break
        finished.sort(key=lambda f: (-f[0].score, f[1]))
        del finished[cfg.beam_width:]
        if not live:
            break
        if len(finished) == cfg.beam_width:
            worst = finished[-1][0].score
            if all(length_normalize(lp, len(toks), cfg.length_penalty) <= worst for toks, lp in live):
                break
    else:
        for toks, lp in live:
            hyp = Hypothesis(toks, lp, length_normalize(lp, len(toks), cfg.length_penalty), truncated=True)
            finished.append((hyp, order))
            order += 1
    # Highest score; on ties the earliest completion.
    hyps = [h for h, _ in sorted(finished, key=lambda f: (-f[0].score, f[1]))]
    best = hyps[0]
    return BeamResult(best.tokens, best.score, best.truncated, hyps)


def sequence_score(next_logits: Callable, tokens: Sequence[int], cfg: GenConfig) -> float:
    """Recompute a hypothesis score from its token ids."""
    lp = 0.0
    prefix = ()
    for tok in tokens:
        row = np.asarray(next_logits([prefix]), dtype=np.float64)[0]
        lp += float(log_softmax(apply_repetition_penalty(row, prefix, cfg.repetition_penalty))[tok])
        prefix = prefix + (int(tok),)
    return length_normalize(lp, len(tokens), cfg.length_penalty)


class LMScorer:
    """``next_logits`` over a fixed visual+prompt prefix of the vision-LM."""

    def __init__(self, model: VisionLM, embeds: torch.Tensor):
        self.model = model
        self.embeds = embeds.detach()

    def __call__(self, prefixes):
        with torch.no_grad():
            ids = torch.as_tensor([list(p) for p in prefixes], dtype=torch.long)
            tok = self.model.lm.embed_tokens(ids).to(self.embeds.dtype)
            base = self.embeds.expand(len(prefixes), *self.embeds.shape)
            logits = self.model.lm(torch.cat([base, tok], dim=1))
        return logits[:, -1].double().numpy()


def generate(model: VisionLM, images: Sequence, prompt: str, cfg: GenConfig,
             tokenizer: ByteTokenizer | None = None) -> dict:
    """Decode one answer for ``images`` + ``prompt``; returns text, score, truncated flag."""
    tokenizer = tokenizer or ByteTokenizer()
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            visual = encode_images(model, images)
            inp = assemble_lm_input(model, visual, tokenizer.encode(prompt))
        result = beam_search(LMScorer(model, inp.embeds), cfg, tokenizer.eos_id)
    finally:
        model.train(was_training)
    return {"text": tokenizer.decode(result.tokens), "score": result.score,
            "truncated": result.truncated, "tokens": list(result.tokens)}


def decode_record(model: VisionLM, request: dict, images: Sequence) -> dict:
    """``{example_id, prompt, language, gen_config}`` -> ``{example_id, text, score, truncated}``."""
    cfg = GenConfig(**request.get("gen_config", {}))
    out = generate(model, images, request["prompt"], cfg)
    return {"example_id": request["example_id"], "text": out["text"],
            "score": out["score"], "truncated": out["truncated"]}
