"""Multilingual evaluation: CIDEr, exact match, label remapping and reports."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from . import templates as T
from .languages import language_name

CHARACTER_LANGUAGES = frozenset({"zh", "ja", "th"})


class Segmenter:
    """Whitespace tokenization with per-character fallback for zh/ja/th.

    ``overrides`` maps a language code to a ``text -> tokens`` callable and
    takes precedence over both defaults.
    """

    def __init__(self, overrides: Optional[Mapping[str, Callable[[str], list]]] = None):
        self.overrides = dict(overrides or {})

    def segment(self, text: str, language: str = "en") -> list:
        if language in self.overrides:
            return list(self.overrides[language](text))
        if language in CHARACTER_LANGUAGES:
            return [ch for ch in text if not ch.isspace()]
        return text.split()

    __call__ = segment


# ---------------------------------------------------------------- CIDEr

def _ngrams(tokens: Sequence[str], n_max: int) -> Counter:
    counts = Counter()
    for k in range(1, n_max + 1):
        for i in range(len(tokens) - k + 1):
            counts[tuple(tokens[i : i + k])] += 1
    return counts


def _tfidf(counts: Counter, df: Counter, log_n: float, n_max: int):
    vec = [defaultdict(float) for _ in range(n_max)]
    norm = [0.0] * n_max
    length = 0
    for gram, tf in counts.items():
        k = len(gram) - 1
        w = tf * (log_n - math.log(max(1.0, df[gram])))
        vec[k][gram] = w
        norm[k] += w * w
        if k == 1:
            length += tf
    return vec, [math.sqrt(x) for x in norm], length


def _sim(vh, vr, nh, nr, lh, lr, n_max, sigma):
    delta = float(lh - lr)
    penalty = math.exp(-(delta**2) / (2 * sigma**2))
    total = 0.0
    for k in range(n_max):
        val = 0.0
        for gram, w in vh[k].items():
            # Clip the candidate weight at the reference weight.
            val += min(w, vr[k].get(gram, 0.0)) * vr[k].get(gram, 0.0)
        if nh[k] != 0 and nr[k] != 0:
            val /= nh[k] * nr[k]
        total += val * penalty
    return total


def cider_per_image(candidates: Mapping, references: Mapping, segmenter: Optional[Segmenter] = None,
                    language: str = "en", n: int = 4, sigma: float = 6.0) -> dict:
    """Per-image CIDEr scores.

    TF-IDF n-gram vectors (n = 1..4) with IDF from the reference corpus,
    clipped cosine per n-gram order, a gaussian penalty on the length
    difference, averaged over references and orders, scaled by 10. As in
    the widely used COCO evaluation code, "length" counts bigrams.
    """
    seg = segmenter or Segmenter()
    ids = list(candidates)
    for i in ids:
        if not references.get(i):
            raise ValueError(f"image {i!r} has no reference captions")
    refs = {i: [_ngrams(seg(r, language), n) for r in references[i]] for i in ids}
    hyps = {i: _ngrams(seg(candidates[i], language), n) for i in ids}
    df = Counter()
    for i in ids:
        for gram in {g for r in refs[i] for g in r}:
            df[gram] += 1
    log_n = math.log(float(len(ids))) if ids else 0.0
    scores = {}
    for i in ids:
        vh, nh, lh = _tfidf(hyps[i], df, log_n, n)
        sims = []
        for r in refs[i]:
            vr, nr, lr = _tfidf(r, df, log_n, n)
            sims.append(_sim(vh, vr, nh, nr, lh, lr, n, sigma))
        scores[i] = 10.0 * sum(sims) / len(sims) / n
    return scores


def cider(candidates: Mapping, references: Mapping, segmenter: Optional[Segmenter] = None,
          language: str = "en", n: int = 4, sigma: float = 6.0) -> float:
    """Corpus CIDEr: mean of :func:`cider_per_image`."""
    per = cider_per_image(candidates, references, segmenter, language, n, sigma)
    return sum(per.values()) / len(per) if per else 0.0


# ---------------------------------------------------------------- exact match

TERMINAL_PUNCT = ".!?,;:。！？、"


def normalize_answer(text: str) -> str:
    return text.strip().casefold().rstrip(TERMINAL_PUNCT).strip()


def exact_match(prediction: str, gold, normalize: bool = True) -> bool:
    """True iff the prediction equals the gold answer (or any gold candidate)."""
    candidates = [gold] if isinstance(gold, str) else list(gold)
    norm = normalize_answer if normalize else (lambda s: s)
    p = norm(prediction)
    return any(p == norm(c) for c in candidates)


LABEL_MAPS = {
    "xvnli": {"entailment": "yes", "contradiction": "no", "neutral": "maybe"},
    "marvl": {"true": "yes", "false": "no"},
}


def remap_labels(task: str, label) -> str:
    if task not in LABEL_MAPS:
        raise ValueError(f"task {task!r} has no label remapping")
    key = str(label).strip().lower()
    try:
        return LABEL_MAPS[task][key]
    except KeyError:
        raise ValueError(f"unknown {task} label {label!r}") from None


# ---------------------------------------------------------------- prompts/tasks

@dataclass(frozen=True)
class EvalTask:
    name: str
    metric: str  # "cider" or "accuracy"
    num_images: int = 1
    classification: bool = False
    slot: Optional[str] = None  # field filling the non-language placeholder


EVAL_TASKS = {
    "xflickrco": EvalTask("xflickrco", "cider"),
    "xm3600": EvalTask("xm3600", "cider"),
    "xgqa": EvalTask("xgqa", "accuracy", classification=True, slot="QUESTION"),
    "maxm": EvalTask("maxm", "accuracy", classification=True, slot="QUESTION"),
    "xvnli": EvalTask("xvnli", "accuracy", classification=True, slot="HYPOTHESIS"),
    "marvl": EvalTask("marvl", "accuracy", num_images=2, classification=True, slot="STATEMENT"),
}


def get_task(task: str) -> EvalTask:
    try:
        return EVAL_TASKS[task]
    except KeyError:
        raise ValueError(f"unknown evaluation task {task!r}") from None


def render_eval_prompt(task: str, slots: dict) -> str:
    """Fill the evaluation template of ``task``; the same template is used to train on the task."""
    get_task(task)
    return T.fill(T.EVAL_TEMPLATES[task], slots).strip()


def prompt_for_gold(task: str, gold: dict) -> str:
    t = get_task(task)
    slots = {"LANGUAGE": language_name(gold["language"])}
    if t.slot is not None:
        slots[t.slot] = gold[t.slot.lower()]
    return render_eval_prompt(task, slots)


def gold_answer(task: str, gold: dict):
    """The string (or candidate list) a prediction is matched against."""
    if task in LABEL_MAPS:
        return remap_labels(task, gold["label"])
    for key in ("candidates", "answers"):
        if key in gold:
            return list(gold[key])
    return gold["answer"]


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    task: str
    metric: str
    per_language: dict
    english: Optional[float]
    average_non_english: Optional[float]
    n_examples: dict
    config_hash: str
    predictions_source: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def to_table(self) -> str:
        langs = sorted(self.per_language, key=lambda c: (c != "en", c))
        head = ["task", "metric"] + langs + ["avg(non-en)"]
        avg = "n/a" if self.average_non_english is None else f"{self.average_non_english:.4f}"
        row = [self.task, self.metric] + [f"{self.per_language[c]:.4f}" for c in langs] + [avg]
        counts = ["n", ""] + [str(self.n_examples[c]) for c in langs] + [str(sum(self.n_examples.values()))]
        widths = [max(len(a), len(b), len(c)) for a, b, c in zip(head, row, counts)]
        fmt = lambda cells: "  ".join(x.ljust(w) for x, w in zip(cells, widths)).rstrip()
        return "\n".join([fmt(head), fmt(row), fmt(counts)]) + "\n"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def evaluate_task(predictions: Sequence[dict], gold: Sequence[dict], task: str,
                  segmenter: Optional[Segmenter] = None, normalize: bool = True,
                  predictions_source: str = "", config: Optional[dict] = None) -> EvalReport:
    """Score ``{example_id, language, prediction}`` rows against gold rows, per language."""
    t = get_task(task)
    pred = {p["example_id"]: p["prediction"] for p in predictions}
    missing = [g["example_id"] for g in gold if g["example_id"] not in pred]
    if missing:
        raise ValueError(f"missing predictions for example ids: {missing}")
    by_lang = defaultdict(list)
    for g in gold:
        by_lang[g["language"]].append(g)
    per_language, n_examples = {}, {}
    for lang in sorted(by_lang):
        rows = by_lang[lang]
        n_examples[lang] = len(rows)
        if t.metric == "cider":
            cands = {g["example_id"]: pred[g["example_id"]] for g in rows}
            refs = {g["example_id"]: list(g["references"]) for g in rows}
            per_language[lang] = cider(cands, refs, segmenter, lang)
        else:
            hits = sum(exact_match(pred[g["example_id"]], gold_answer(task, g), normalize) for g in rows)
            per_language[lang] = hits / len(rows)
    non_en = [v for k, v in per_language.items() if k != "en"]
    cfg = {"task": task, "metric": t.metric, "normalize": normalize, **(config or {})}
    return EvalReport(
        task=task,
        metric=t.metric,
        per_language=per_language,
        english=per_language.get("en"),
        average_non_english=sum(non_en) / len(non_en) if non_en else None,
        n_examples=n_examples,
        config_hash=config_hash(cfg),
        predictions_source=predictions_source,
    )


def plot_report(report: EvalReport, path) -> Path:
    """Per-language bar chart of one report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    langs = sorted(report.per_language, key=lambda c: (c != "en", c))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(langs) + 2), 3))
    ax.bar(langs, [report.per_language[c] for c in langs], color=["#555" if c == "en" else "#4c72b0" for c in langs])
    if report.average_non_english is not None:
        ax.axhline(report.average_non_english, ls="--", lw=1, color="k", label="avg non-en")
        ax.legend(loc="lower right", fontsize=8)
    ax.set_ylabel(report.metric)
    ax.set_title(report.task)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
