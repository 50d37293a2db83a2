"""Synthetic images and corpora for desk-scale runs.

Images are coloured shapes rendered deterministically from their id, so
captions and answers are actually predictable from the pixels.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .trainer import ImageStore

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.9, 0.9, 0.1),
}
SHAPES = ("square", "circle", "stripes", "cross")


def _seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def render(color: str, shape: str, size: int = 32, noise_seed: int = 0, noise: float = 0.05) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    if shape == "square":
        mask = (abs(yy - 0.5) < 0.3) & (abs(xx - 0.5) < 0.3)
    elif shape == "circle":
        mask = (yy - 0.5) ** 2 + (xx - 0.5) ** 2 < 0.1
    elif shape == "stripes":
        mask = (np.floor(xx * 6) % 2) == 0
    elif shape == "cross":
        mask = (abs(yy - 0.5) < 0.12) | (abs(xx - 0.5) < 0.12)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    img = np.full((size, size, 3), 0.05)
    img[mask] = COLORS[color]
    rng = np.random.default_rng(noise_seed)
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def concept_of(image_id: str) -> tuple:
    """Image ids look like ``<color>-<shape>-<n>``."""
    color, shape, _ = image_id.split("-", 2)
    return color, shape


def image_for(image_id: str, size: int = 32) -> np.ndarray:
    color, shape = concept_of(image_id)
    return render(color, shape, size, noise_seed=_seed(image_id) % 2**32)


def make_images(image_ids, size: int = 32) -> ImageStore:
    return ImageStore({i: image_for(i, size) for i in sorted(set(image_ids))})


def image_ids(n: int, seed: int = 0, prefix: str = "") -> list:
    rng = np.random.default_rng(seed)
    concepts = [(c, s) for c in COLORS for s in SHAPES]
    out = []
    for k in range(n):
        c, s = concepts[int(rng.integers(len(concepts)))]
        out.append(f"{c}-{s}-{prefix}{k}")
    return out


def caption_examples(n: int, seed: int = 0):
    """``n`` English caption examples ("a red circle") with their images."""
    from .forge import InstructionExample

    ids = image_ids(n, seed)
    examples = []
    for k, i in enumerate(ids):
        color, shape = concept_of(i)
        examples.append(InstructionExample(
            example_id=f"toy:{k}", dataset="capfilt", task="caption", language="en",
            prompt="Caption the image.", target=f"a {color} {shape}", image_ids=[i], source=f"toy:{k}",
        ))
    return examples, make_images(ids)


# ---------------------------------------------------------------- corpora on disk

def _write_jsonl(path: Path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def write_toy_corpora(out_dir, n_images: int = 24, seed: int = 0) -> dict:
    """Write six small source corpora, an image archive and eval gold files.

    Returns ``{name: path}``. Eval images use a distinct id range; one of
    them is also captioned in the training corpus, so the exclusion list
    has something to drop.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = image_ids(n_images, seed, prefix="t")
    eval_ids = image_ids(8, seed + 1, prefix="e")
    rng = np.random.default_rng(seed)
    caps, coco, vqa, aok, detail, conv = [], [], [], [], [], []
    for k, i in enumerate(ids):
        color, shape = concept_of(i)
        caps.append({"image_id": i, "caption": f"a {color} {shape} on a dark background"})
        caps.append({"image_id": i, "caption": f"{color} {shape} shown in the picture"})
        coco.append({"image_id": i, "caption": f"a picture of a {color} {shape}"})
        vqa.append({"image_id": i, "question": "What color is the shape?", "answers": [color, color, "dark"]})
        vqa.append({"image_id": i, "question": "What shape is shown?", "answer": shape})
        if k % 3 == 0:
            aok.append({"image_id": i, "question": "Is the shape bright?", "answer": "yes",
                        "rationales": [f"The {shape} is {color}.", "It stands out from the dark background.",
                                       f"{color.capitalize()} is a bright color."]})
        if k % 4 == 0:
            detail.append({"image_id": i, "caption": f"The image shows a {color} {shape}. The background is dark."})
        if k % 2 == 0:
            long_answer = "It is a shape. It is colored. It sits on a background. It is centered. It is simple."
            conv.append({"image_id": i, "turns": [
                {"question": "What is in the image?", "answer": f"A {color} {shape}."},
                {"question": "Describe it at length.", "answer": long_answer},
            ]})
    coco.append({"image_id": eval_ids[0], "caption": "an image that also appears in evaluation"})
    paths = {}
    for name, rows in (("capfilt", caps), ("mscoco", coco), ("vqav2", vqa), ("aokvqa", aok),
                       ("llava_detail", detail), ("llava_conv", conv)):
        paths[name] = out / f"{name}.jsonl"
        _write_jsonl(paths[name], rows)
    make_images(ids + eval_ids).save_npz(out / "images.npz")
    paths["images"] = out / "images.npz"

    langs = ["en", "de", "fr", "es", "zh", "ja", "ru", "bn"]
    gqa, flickr, vnli, marvl = [], [], [], []
    for k, i in enumerate(eval_ids):
        color, shape = concept_of(i)
        lang = langs[k % len(langs)]
        gqa.append({"example_id": f"xgqa-{k}", "language": lang, "image_ids": [i],
                    "question": "What color is the shape?", "answer": color})
        flickr.append({"example_id": f"xflickrco-{k}", "language": lang, "image_ids": [i],
                       "references": [f"a {color} {shape}", f"{color} {shape} on dark background"]})
        vnli.append({"example_id": f"xvnli-{k}", "language": lang, "image_ids": [i],
                     "hypothesis": f"The shape is {color}.",
                     "label": ["entailment", "contradiction", "neutral"][int(rng.integers(3))]})
        other = eval_ids[(k + 1) % len(eval_ids)]
        marvl.append({"example_id": f"marvl-{k}", "language": lang, "image_ids": [i, other],
                      "statement": f"One image contains a {shape}.", "label": ["true", "false"][k % 2]})
    for name, rows in (("xgqa", gqa), ("xflickrco", flickr), ("xvnli", vnli), ("marvl", marvl)):
        paths[f"gold_{name}"] = out / f"gold_{name}.jsonl"
        _write_jsonl(paths[f"gold_{name}"], rows)
    paths["exclusion"] = out / "eval_image_ids.txt"
    paths["exclusion"].write_text("\n".join(eval_ids) + "\n", encoding="utf-8")
    return paths
