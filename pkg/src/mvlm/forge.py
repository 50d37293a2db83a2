"""Build the multilingual instruction mixture.

Pipeline: subsample the web captions by noun phrase, derive per-task items
from every source record, draw one target language per item, translate the
translatable fields, render an instruction template, and shuffle everything
into one JSON-lines mix with a count manifest.
"""

from __future__ import annotations

import json
import logging
import random
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import templates as T
from .languages import TRAINING_LANGUAGES, language_name
from .mt import MTClient

logger = logging.getLogger(__name__)

DATASETS = ("capfilt", "mscoco", "vqav2", "aokvqa", "llava_detail", "llava_conv")
REQUIRED_FIELDS = {
    "capfilt": ("caption",),
    "mscoco": ("caption",),
    "vqav2": ("question", "answer"),
    "aokvqa": ("question", "answer", "rationales"),
    "llava_detail": ("caption",),
    "llava_conv": ("turns",),
}
TASKS = ("caption", "caption_detail", "vqa", "vqg", "vqa_rationale", "rationale_gen")
ENGLISH_ONLY_DATASETS = frozenset({"aokvqa"})
MIX_KEYS = ("example_id", "dataset", "task", "language", "image_ids", "prompt", "target", "source")


@dataclass(frozen=True)
class RawRecord:
    dataset: str
    image_id: str
    payload: dict
    record_id: str = "0"

    def __post_init__(self):
        if self.dataset not in REQUIRED_FIELDS:
            raise ValueError(f"unknown dataset kind {self.dataset!r}")
        missing = [f for f in REQUIRED_FIELDS[self.dataset] if f not in self.payload]
        if missing:
            raise ValueError(f"{self.dataset} record {self.record_id} lacks field(s) {missing}")

    @property
    def ref(self) -> str:
        return f"{self.dataset}:{self.record_id}"


@dataclass
class TaskItem:
    """An English task instance derived from a record, before localization."""

    task: str
    fields: dict
    record: RawRecord
    index: int = 0

    @property
    def example_id(self) -> str:
        return f"{self.record.ref}:{self.index}"


@dataclass
class InstructionExample:
    example_id: str
    dataset: str
    task: str
    language: str
    prompt: str
    target: str
    image_ids: list = field(default_factory=list)
    source: str = ""

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in MIX_KEYS}, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionExample":
        return cls(**{k: d[k] for k in MIX_KEYS})


class LanguageDistribution:
    """Target-language probabilities over the training language set."""

    def __init__(self, entries: dict, languages=TRAINING_LANGUAGES):
        if not entries:
            raise ValueError("language distribution is empty")
        unknown = set(entries) - set(languages)
        if unknown:
            raise ValueError(f"language code(s) outside the configured set: {sorted(unknown)}")
        if any(p < 0 for p in entries.values()):
            raise ValueError("language probabilities must be non-negative")
        total = sum(entries.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"language probabilities sum to {total}, not 1")
        self.entries = dict(sorted(entries.items()))

    @classmethod
    def from_weights(cls, weights: dict, **kw) -> "LanguageDistribution":
        total = float(sum(weights.values()))
        if total <= 0:
            raise ValueError("language weights must have positive mass")
        return cls({k: v / total for k, v in weights.items()}, **kw)

    @property
    def codes(self) -> list:
        return list(self.entries)

    @property
    def probs(self) -> np.ndarray:
        p = np.array(list(self.entries.values()), dtype=np.float64)
        return p / p.sum()


# ---------------------------------------------------------------- noun phrases

_STOPWORDS = frozenset(
    """a an the this that these those some any each every no another its his her their our my your
    of in on at to from with by for over under near into onto through across behind beside between
    above below along around against inside outside next up down off out about while during
    and or but nor so as than then there here where when who which what whose
    is are was were be been being am has have had do does did will would can could may might
    it they them he she we you i him us one two three four five several many few
    very too also just not""".split()
)
# Adjectives may open a phrase but never end one.
_ADJECTIVES = frozenset(
    """red blue green yellow black white brown gray grey orange pink purple
    big small large little tall short long old young new empty full open closed
    wooden metal plastic dark bright colorful other same different top bottom left right front back""".split()
)
# Verbs split phrases.
_VERBS = frozenset(
    """sits sit stands stand lies lie holds hold looks look rides ride walks walk eats eat plays play
    parked covered filled made shown seen""".split()
)
_WORD = re.compile(r"[a-z][a-z'-]*")


def noun_phrases(text: str) -> set:
    """Default extractor: maximal runs of non-stopwords, trimmed to end in a noun-like word.

    Stopwords, lexicon verbs and ``-ing`` forms split runs; trailing
    adjectives and ``-ly`` words are trimmed so a phrase ends in its head.
    """
    phrases = set()
    run = []

    def flush():
        while run and (run[-1] in _ADJECTIVES or run[-1].endswith("ly")):
            run.pop()
        if run:
            phrases.add(" ".join(run))
        run.clear()

    for tok in _WORD.findall(text.lower()):
        if tok in _STOPWORDS or tok in _VERBS or (tok.endswith("ing") and len(tok) > 4):
            flush()
        else:
            run.append(tok)
    flush()
    return phrases


def capfilt_selection(captions: Sequence[tuple], max_per_phrase: int = 30, min_occurrences: int = 10,
                      seed: int = 0, extractor: Callable[[str], Iterable[str]] = noun_phrases) -> dict:
    """Phrase -> sorted caption indices picked for that phrase."""
    by_phrase = defaultdict(list)
    for i, (_, caption) in enumerate(captions):
        for phrase in set(extractor(caption)):
            by_phrase[phrase].append(i)
    rng = random.Random(seed)
    picked = {}
    for phrase in sorted(by_phrase):
        idx = by_phrase[phrase]
        if len(idx) < min_occurrences:
            continue
        chosen = idx if len(idx) <= max_per_phrase else rng.sample(idx, max_per_phrase)
        picked[phrase] = sorted(chosen)
    return picked


def sample_capfilt(captions: Sequence[tuple], max_per_phrase: int = 30, min_occurrences: int = 10,
                   seed: int = 0, extractor: Callable[[str], Iterable[str]] = noun_phrases) -> list:
    """Noun-phrase-balanced subset of ``(image_id, caption)`` pairs, in corpus order.

    Every phrase seen in at least ``min_occurrences`` captions contributes at
    most ``max_per_phrase`` of them; the union is deduplicated by position.
    """
    picked = capfilt_selection(captions, max_per_phrase, min_occurrences, seed, extractor)
    keep = sorted({i for idx in picked.values() for i in idx})
    return [captions[i] for i in keep]


# ---------------------------------------------------------------- task items

_SENTENCE_END = re.compile(r"[.!?]+(?:\s+|$)")


def count_sentences(text: str) -> int:
    parts = [p for p in _SENTENCE_END.split(text.strip()) if p.strip()]
    return max(len(parts), 1 if text.strip() else 0)


def derive_task_examples(record: RawRecord, max_answer_sentences: int = 3) -> list:
    p = record.payload
    kind = record.dataset
    if kind in ("capfilt", "mscoco"):
        return [TaskItem("caption", {"caption": p["caption"]}, record)]
    if kind == "llava_detail":
        fields = {"caption": p["caption"]}
        if p.get("instruction"):
            fields["instruction"] = p["instruction"]
        return [TaskItem("caption_detail", fields, record)]
    if kind == "vqav2":
        qa = {"question": p["question"], "answer": p["answer"]}
        return [TaskItem("vqa", dict(qa), record, 0), TaskItem("vqg", dict(qa), record, 1)]
    if kind == "aokvqa":
        items = []
        for j, rationale in enumerate(p["rationales"]):
            fields = {"question": p["question"], "answer": p["answer"], "rationale": rationale}
            items.append(TaskItem("vqa_rationale", dict(fields), record, 2 * j))
            items.append(TaskItem("rationale_gen", dict(fields), record, 2 * j + 1))
        return items
    if kind == "llava_conv":
        items = []
        for j, (q, a) in enumerate(_turn_pairs(p["turns"])):
            if count_sentences(a) <= max_answer_sentences:
                items.append(TaskItem("vqa", {"question": q, "answer": a}, record, j))
        return items
    raise ValueError(f"unknown dataset kind {kind!r}")


def _turn_pairs(turns) -> list:
    """Accept ``[{question, answer}]``, ``[[q, a]]`` or alternating ``{from, value}`` turns."""
    pairs = []
    if turns and isinstance(turns[0], dict) and "from" in turns[0]:
        for i in range(0, len(turns) - 1, 2):
            q = turns[i]["value"].replace("<image>", "").strip()
            pairs.append((q, turns[i + 1]["value"].strip()))
        return pairs
    for t in turns:
        if isinstance(t, dict):
            pairs.append((t["question"], t["answer"]))
        else:
            q, a = t
            pairs.append((q, a))
    return pairs


# ---------------------------------------------------------------- languages

def assign_languages(items: Sequence, dist: LanguageDistribution, seed: int = 0, mode: str = "sample") -> list:
    """One language code per item.

    ``sample`` draws i.i.d. from ``dist``; ``quota`` hands out exact
    largest-remainder quotas in a seeded random order. Items from an
    English-only dataset are always tagged ``en`` (their draw is still
    consumed so other items' languages do not shift).
    """
    if not dist.entries:
        raise ValueError("language distribution is empty")
    n = len(items)
    rng = np.random.default_rng(seed)
    codes = dist.codes
    if mode == "sample":
        draws = rng.choice(len(codes), size=n, p=dist.probs) if n else np.zeros(0, dtype=int)
    elif mode == "quota":
        exact = dist.probs * n
        counts = np.floor(exact).astype(int)
        rest = n - counts.sum()
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:rest]] += 1
        draws = rng.permutation(np.repeat(np.arange(len(codes)), counts))
    else:
        raise ValueError(f"unknown assignment mode {mode!r}")
    out = []
    for item, d in zip(items, draws):
        ds = _dataset_of(item)
        out.append("en" if ds in ENGLISH_ONLY_DATASETS else codes[int(d)])
    return out


def _dataset_of(item) -> str | None:
    if isinstance(item, TaskItem):
        return item.record.dataset
    if isinstance(item, RawRecord):
        return item.dataset
    return getattr(item, "dataset", None)


# ---------------------------------------------------------------- templates

class TemplateBank:
    """Caches the machine-translated instruction templates per language."""

    def __init__(self, mt: MTClient | None):
        self.mt = mt
        self._cache = {}

    def translated(self, pool: tuple, language: str) -> tuple:
        if language == "en":
            return pool
        key = (pool, language)
        if key not in self._cache:
            if self.mt is None:
                raise ValueError("translating templates needs an MT client")
            self._cache[key] = tuple(self.mt.translate(list(pool), "en", language))
        return self._cache[key]

    def caption_pool(self, language: str) -> tuple:
        return T.CAPTION_LANGUAGE_TEMPLATES + self.translated(T.CAPTION_TRANSLATABLE_TEMPLATES, language)


def render_template(task: str, language: str, slots: dict, rng: random.Random | None = None,
                    pool: Sequence[str] | None = None) -> str:
    """Pick one template for ``task`` uniformly and substitute its slots.

    ``$LANGUAGE`` defaults to the English name of ``language``.
    """
    if pool is None:
        try:
            pool = T.TRAIN_TEMPLATES[task]
        except KeyError:
            raise ValueError(f"no training templates for task {task!r}") from None
    rng = rng or random.Random(0)
    slots = {"LANGUAGE": language_name(language), **slots}
    return T.fill(T.choose(pool, rng), slots).strip()


def localize(item: TaskItem, language: str, mt: MTClient, templates: TemplateBank | None = None,
             rng: random.Random | None = None) -> InstructionExample:
    """Turn an English task item into a prompt/target pair in ``language``.

    Questions, captions, LLaVA instructions and LLaVA answers are
    translated; VQAv2/A-OKVQA short answers and rationales are kept in
    English. Only the captioning and LLaVA instructions come from a
    translated pool; all other templates stay English and name the target
    language instead.
    """
    if language != "en" and language not in mt.supported_languages():
        raise ValueError(f"language {language!r} is not supported by the MT client")
    ds = item.record.dataset
    if ds in ENGLISH_ONLY_DATASETS and language != "en":
        raise ValueError(f"{ds} examples are never translated (asked for {language!r})")
    templates = templates or TemplateBank(mt)
    rng = rng or random.Random(item.example_id)
    f = item.fields

    def tr(*texts):
        if language == "en":
            return list(texts)
        return mt.translate(list(texts), "en", language)

    task = item.task
    if task == "caption":
        (target,) = tr(f["caption"])
        prompt = render_template("caption", language, {}, rng, templates.caption_pool(language))
    elif task == "caption_detail":
        instruction = f.get("instruction") or T.choose(T.DETAIL_INSTRUCTIONS, rng)
        prompt, target = tr(instruction, f["caption"])
    elif task == "vqa" and ds == "llava_conv":
        prompt, target = tr(f["question"], f["answer"])
    elif task == "vqa":
        (question,) = tr(f["question"])
        prompt = render_template("vqa", language, {"QUESTION": question}, rng)
        target = f["answer"]
    elif task == "vqg":
        prompt = render_template("vqg", language, {"ANSWER": f["answer"]}, rng)
        (target,) = tr(f["question"])
    elif task == "vqa_rationale":
        prompt = render_template("vqa_rationale", language, {"QUESTION": f["question"]}, rng)
        target = render_template("vqa_rationale", language,
                                 {"ANSWER": f["answer"], "RATIONAL": f["rationale"]}, rng,
                                 T.VQA_RATIONALE_TARGETS)
    elif task == "rationale_gen":
        prompt = render_template("rationale_gen", language,
                                 {"QUESTION": f["question"], "ANSWER": f["answer"]}, rng)
        target = f["rationale"]
    else:
        raise ValueError(f"unknown task {task!r}")
    return InstructionExample(
        example_id=item.example_id,
        dataset=ds,
        task=task,
        language=language,
        prompt=prompt,
        target=target,
        image_ids=[item.record.image_id],
        source=item.record.ref,
    )


# ---------------------------------------------------------------- mixing

def build_mix(sources: Sequence[Iterable[InstructionExample]], eval_exclusion=frozenset(), seed: int = 0):
    """Merge example streams, drop evaluation images, and shuffle.

    Returns ``(examples, manifest)``. Examples are first put in example-id
    order so the result does not depend on how the streams were produced.
    """
    exclusion = set(eval_exclusion)
    pooled = [ex for stream in sources for ex in stream]
    kept = [ex for ex in pooled if not exclusion.intersection(ex.image_ids)]
    dropped = len(pooled) - len(kept)
    kept.sort(key=lambda ex: ex.example_id)
    random.Random(seed).shuffle(kept)
    if not kept:
        logger.warning("instruction mix is empty")
    manifest = {
        "total_in": len(pooled),
        "total": len(kept),
        "excluded_dropped": dropped,
        "per_dataset": _counts(ex.dataset for ex in kept),
        "per_task": _counts(ex.task for ex in kept),
        "per_language": _counts(ex.language for ex in kept),
    }
    return kept, manifest


def _counts(values) -> dict:
    return dict(sorted(Counter(values).items()))


def write_mix(examples: Sequence[InstructionExample], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
    return path


def read_mix(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [InstructionExample.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_manifest(manifest: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- readers

def read_records(path, dataset: str) -> list:
    """Load one source corpus from JSON lines.

    Captions ``{image_id, caption}``; VQA ``{image_id, question, answer}``
    (or ``answers``: the most frequent one is kept); A-OKVQA adds
    ``rationales``; dialogs ``{image_id, turns}``.
    """
    if dataset not in REQUIRED_FIELDS:
        raise ValueError(f"unknown dataset kind {dataset!r}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            row = json.loads(line)
            if "answer" not in row and "answers" in row:
                row["answer"] = _majority(row["answers"])
            rid = str(row.pop("id", lineno))
            image_id = str(row.pop("image_id"))
            records.append(RawRecord(dataset, image_id, row, rid))
    return records


def _majority(answers) -> str:
    answers = [a["answer"] if isinstance(a, dict) else a for a in answers]
    counts = Counter(answers)
    best = max(counts.values())
    return next(a for a in answers if counts[a] == best)


# ---------------------------------------------------------------- pipeline

def forge(records: dict, dist: LanguageDistribution, mt: MTClient, seed: int = 0,
          eval_exclusion=frozenset(), capfilt_max_per_phrase: int = 30, capfilt_min_occurrences: int = 10,
          assignment: str = "sample", workers: int = 1):
    """Run the whole forge over ``{dataset: [RawRecord]}``; returns ``(examples, manifest)``."""
    streams = []
    per_source = {}
    bank = TemplateBank(mt)
    for ds in DATASETS:
        recs = list(records.get(ds, []))
        if ds == "capfilt" and recs:
            picked = capfilt_selection([(r.image_id, r.payload["caption"]) for r in recs],
                                       capfilt_max_per_phrase, capfilt_min_occurrences, seed)
            recs = [recs[i] for i in sorted({i for idx in picked.values() for i in idx})]
        items = [it for r in recs for it in derive_task_examples(r)]
        langs = assign_languages(items, dist, seed=_stream_seed(seed, ds), mode=assignment)
        # Pre-warm the template cache so worker threads only read it.
        for lang in sorted(set(langs)):
            if lang != "en":
                bank.caption_pool(lang)

        def run(pair):
            it, lang = pair
            return localize(it, lang, mt, bank, random.Random(f"{seed}:{it.example_id}"))

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                examples = list(pool.map(run, zip(items, langs)))
        else:
            examples = [run(p) for p in zip(items, langs)]
        per_source[ds] = len(examples)
        streams.append(examples)
    mix, manifest = build_mix(streams, eval_exclusion, seed)
    manifest["per_source_derived"] = per_source
    return mix, manifest


def _stream_seed(seed: int, dataset: str) -> int:
    return seed * 1000 + DATASETS.index(dataset)
