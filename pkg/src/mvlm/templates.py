"""Instruction templates for training examples and evaluation prompts."""

from __future__ import annotations

import random
import re

PLACEHOLDER = re.compile(r"\$(LANGUAGE|QUESTION|ANSWER|RATIONAL|HYPOTHESIS|STATEMENT)")

# Captioning templates naming the output language; they stay English.
CAPTION_LANGUAGE_TEMPLATES = (
    "Caption the image in $LANGUAGE.",
    "Short $LANGUAGE image caption:",
    "Image caption (in $LANGUAGE):",
    "Briefly describe the image in $LANGUAGE.",
    "Write a short $LANGUAGE image description.",
    "Summarize the image in $LANGUAGE.",
)
# Placeholder-free captioning templates; these get machine-translated.
CAPTION_TRANSLATABLE_TEMPLATES = (
    "Caption the image.",
    "Short image caption:",
    "Briefly describe the image.",
    "Write a short image description.",
    "Summarize the image.",
)
VQA_TEMPLATES = (
    "$QUESTION. Short English answer:",
    "Question: $QUESTION. Brief answer (in English):",
    "Give a short answer in English to the following question. $QUESTION",
    "Answer the provided question in English with three words or less. $QUESTION",
    "What is the English answer to this question? $QUESTION",
)
VQG_TEMPLATES = (
    "Given the image, generate a question in $LANGUAGE whose answer is: $ANSWER. Question:",
    'Based on the image, create a question (in $LANGUAGE) for which the answer is "$ANSWER".',
    "From the image provided, come up with a $LANGUAGE question that leads to the reply: $ANSWER. Question:",
)
VQA_RATIONALE_TEMPLATES = (
    "Reason the answer to the following question. $QUESTION",
    "Use reasoning to come to an answer for this question. $QUESTION",
    "Think step-by-step to answer this question. $QUESTION",
)
VQA_RATIONALE_TARGETS = (
    "$ANSWER. So the answer is $RATIONAL",
    "$ANSWER so  $RATIONAL",
    "$RATIONAL. This means the answer is  $ANSWER",
)
# The second entry is printed with a bare "{}" for the question slot.
RATIONALE_GEN_TEMPLATES = (
    "Question: $QUESTION Answer: $ANSWER. Explanation:",
    "Question: $QUESTION: Answer: $ANSWER. The reason is because",
    'The answer to the question "$QUESTION" is "$ANSWER". Why?',
    'Why is the answer to the question "$QUESTION"  "$ANSWER"?',
    'Explain why the answer to the question "$QUESTION" is "$ANSWER"',
)
# LLaVA-detail records without their own instruction fall back to these.
DETAIL_INSTRUCTIONS = (
    "Describe the following image in detail.",
    "Provide a detailed description of the given image.",
    "Explain the visual content of the image in great detail.",
)

TRAIN_TEMPLATES = {
    "caption": CAPTION_LANGUAGE_TEMPLATES + CAPTION_TRANSLATABLE_TEMPLATES,
    "vqa": VQA_TEMPLATES,
    "vqg": VQG_TEMPLATES,
    "vqa_rationale": VQA_RATIONALE_TEMPLATES,
    "rationale_gen": RATIONALE_GEN_TEMPLATES,
}

EVAL_TEMPLATES = {
    "xflickrco": "Caption in $LANGUAGE:",
    "xm3600": "Caption in $LANGUAGE:",
    "xgqa": "Question: $QUESTION Short answer in $LANGUAGE:",
    "maxm": "Question: $QUESTION Short answer in $LANGUAGE:",
    "xvnli": 'Is it guaranteed true that "$HYPOTHESIS"? Yes, no, or maybe? Answer in English:',
    "marvl": 'Based on the two images, is it correct to say "$STATEMENT"? Yes or no?  Answer in English:',
}


def required_slots(template: str) -> set:
    return set(PLACEHOLDER.findall(template))


def fill(template: str, slots: dict) -> str:
    missing = required_slots(template) - set(slots)
    if missing:
        raise KeyError(f"missing template slot(s) {sorted(missing)} for {template!r}")
    text = PLACEHOLDER.sub(lambda m: str(slots[m.group(1)]), template)
    return text


def has_placeholder(text: str) -> bool:
    return PLACEHOLDER.search(text) is not None


def choose(pool, rng: random.Random) -> str:
    return pool[rng.randrange(len(pool))]
