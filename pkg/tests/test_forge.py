import json
import math
import random
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from mvlm import forge as F
from mvlm import templates as T
from mvlm.languages import MC4_LANGUAGES, TRAINING_LANGUAGES, language_name
from mvlm.mt import HttpMT, MockMT, MTError, RecordingMT
from mvlm.toy import write_toy_corpora


def rec(dataset, image_id="img", rid="0", **payload):
    return F.RawRecord(dataset, image_id, payload, rid)


def caption_items(n):
    return [F.TaskItem("caption", {"caption": "x"}, rec("mscoco", f"i{k}", str(k), caption="x")) for k in range(n)]


# ---------------------------------------------------------------- languages

def test_language_sets():
    assert len(MC4_LANGUAGES) == 101
    assert len(TRAINING_LANGUAGES) == 96
    assert language_name("de") == "German"
    with pytest.raises(ValueError):
        language_name("xx")


def test_distribution_validation():
    with pytest.raises(ValueError):
        F.LanguageDistribution({})
    with pytest.raises(ValueError):
        F.LanguageDistribution({"en": 0.5, "de": 0.4})
    with pytest.raises(ValueError):
        F.LanguageDistribution({"en": 0.5, "xx": 0.5})
    assert F.LanguageDistribution.from_weights({"en": 3, "de": 1}).entries == {"de": 0.25, "en": 0.75}


# ---------------------------------------------------------------- capfilt

def test_noun_phrase_heuristic():
    assert F.noun_phrases("A red car parked near the old tree") == {"red car", "old tree"}
    assert F.noun_phrases("two dogs playing in the grass") == {"dogs", "grass"}


def test_phrase_below_threshold_contributes_nothing():
    caps = [(f"i{k}", "a dog") for k in range(9)]
    assert F.sample_capfilt(caps) == []


def test_frequent_phrase_capped_at_30():
    caps = [(f"i{k}", "a cat") for k in range(50)]
    picked = F.sample_capfilt(caps, seed=1)
    assert len(picked) == 30
    assert len(set(picked)) == 30


def test_moderate_phrases_all_kept_once():
    caps = [(f"{w}{k}", f"the {w}") for w, n in (("boat", 10), ("horse", 17), ("kite", 30)) for k in range(n)]
    assert F.sample_capfilt(caps) == caps


def test_caption_with_two_frequent_phrases_selected_once():
    caps = [(f"i{k}", "a dog with a ball") for k in range(12)]
    picked = F.sample_capfilt(caps)
    assert picked == caps


@settings(max_examples=30, deadline=None)
@given(counts=st.lists(st.integers(1, 60), min_size=1, max_size=5), seed=st.integers(0, 100))
def test_capfilt_bounds(counts, seed):
    words = ["apple", "bench", "clock", "donut", "fence"]
    caps = [(f"{words[j]}{k}", f"a {words[j]}") for j, n in enumerate(counts) for k in range(n)]
    picked = F.sample_capfilt(caps, seed=seed)
    per = Counter(c for _, c in picked)
    for j, n in enumerate(counts):
        want = 0 if n < 10 else min(n, 30)
        assert per[f"a {words[j]}"] == want
    assert picked == F.sample_capfilt(caps, seed=seed)


def test_empty_corpus():
    assert F.sample_capfilt([]) == []


# ---------------------------------------------------------------- derivation

def test_aokvqa_three_rationales():
    items = F.derive_task_examples(rec("aokvqa", question="q?", answer="a", rationales=["r1", "r2", "r3"]))
    assert Counter(i.task for i in items) == {"vqa_rationale": 3, "rationale_gen": 3}


def test_llava_conv_long_answer_dropped():
    turns = [{"question": f"q{k}?", "answer": "Short answer."} for k in range(3)]
    turns.insert(1, {"question": "long?", "answer": "One. Two. Three. Four. Five."})
    items = F.derive_task_examples(rec("llava_conv", turns=turns))
    assert len(items) == 3 and all(i.task == "vqa" for i in items)


def test_vqav2_two_tasks():
    items = F.derive_task_examples(rec("vqav2", question="q?", answer="a"))
    assert [i.task for i in items] == ["vqa", "vqg"]
    assert len({i.example_id for i in items}) == 2


def test_caption_sources():
    for ds in ("capfilt", "mscoco"):
        assert [i.task for i in F.derive_task_examples(rec(ds, caption="c"))] == ["caption"]
    assert [i.task for i in F.derive_task_examples(rec("llava_detail", caption="c"))] == ["caption_detail"]


def test_unknown_dataset_and_missing_fields():
    with pytest.raises(ValueError):
        rec("flickr", caption="c")
    with pytest.raises(ValueError):
        rec("vqav2", question="q?")


def test_sentence_count():
    assert F.count_sentences("One. Two! Three?") == 3
    assert F.count_sentences("No terminal punctuation") == 1
    assert F.count_sentences("") == 0


# ---------------------------------------------------------------- language assignment

def test_german_share_within_three_sigma():
    shares = {"en": 0.5, "de": 0.06, "fr": 0.14, "es": 0.1, "ru": 0.2}
    langs = F.assign_languages(caption_items(10_000), F.LanguageDistribution(shares), seed=0)
    n, p = 10_000, 0.06
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(langs.count("de") - 600) <= 3 * sigma
    assert len(langs) == 10_000


def test_chi_square_not_rejected():
    codes = ["en", "de", "fr", "es", "ru", "zh", "ja", "pt", "it", "nl"]
    w = np.arange(1, 11, dtype=float)
    dist = F.LanguageDistribution.from_weights(dict(zip(codes, w)))
    n = 100_000
    langs = F.assign_languages(caption_items(n), dist, seed=3)
    counts = Counter(langs)
    observed = [counts[c] for c in dist.codes]
    expected = [dist.entries[c] * n for c in dist.codes]
    assert chisquare(observed, expected).pvalue > 0.001


def test_english_only_distribution():
    langs = F.assign_languages(caption_items(50), F.LanguageDistribution({"en": 1.0}))
    assert set(langs) == {"en"}


def test_assignment_deterministic_and_seeded():
    dist = F.LanguageDistribution({"en": 0.5, "de": 0.5})
    a = F.assign_languages(caption_items(200), dist, seed=4)
    assert a == F.assign_languages(caption_items(200), dist, seed=4)
    assert a != F.assign_languages(caption_items(200), dist, seed=5)


def test_quota_mode_exact():
    dist = F.LanguageDistribution({"en": 0.5, "de": 0.3, "fr": 0.2})
    langs = F.assign_languages(caption_items(10), dist, seed=0, mode="quota")
    assert Counter(langs) == {"en": 5, "de": 3, "fr": 2}


def test_aokvqa_always_english():
    items = F.derive_task_examples(rec("aokvqa", question="q?", answer="a", rationales=["r"] * 3)) * 20
    langs = F.assign_languages(items, F.LanguageDistribution({"de": 1.0}))
    assert set(langs) == {"en"}


# ---------------------------------------------------------------- templates

ALL_SLOTS = {"LANGUAGE": "German", "QUESTION": "What is this?", "ANSWER": "dog", "RATIONAL": "It barks.",
             "HYPOTHESIS": "A dog sleeps.", "STATEMENT": "There is a dog."}


def _all_templates():
    pools = [T.CAPTION_LANGUAGE_TEMPLATES, T.CAPTION_TRANSLATABLE_TEMPLATES, T.VQA_TEMPLATES, T.VQG_TEMPLATES,
             T.VQA_RATIONALE_TEMPLATES, T.VQA_RATIONALE_TARGETS, T.RATIONALE_GEN_TEMPLATES]
    return [t for pool in pools for t in pool] + list(T.EVAL_TEMPLATES.values())


@pytest.mark.parametrize("template", _all_templates())
def test_every_template_renders_placeholder_free(template):
    out = T.fill(template, ALL_SLOTS)
    assert "$" not in out and not T.has_placeholder(out)


def test_template_pool_sizes():
    assert len(T.TRAIN_TEMPLATES["caption"]) == 11
    assert len(T.VQA_TEMPLATES) == 5 and len(T.VQG_TEMPLATES) == 3
    assert len(T.VQA_RATIONALE_TEMPLATES) == 3 and len(T.RATIONALE_GEN_TEMPLATES) == 5


def test_sampling_reaches_every_training_template():
    for task, pool in T.TRAIN_TEMPLATES.items():
        seen = set()
        for s in range(400):
            rng = random.Random(s)
            picked = T.choose(pool, rng)
            seen.add(picked)
        assert seen == set(pool), task


def test_render_caption_french():
    outs = {F.render_template("caption", "fr", {}, random.Random(s)) for s in range(200)}
    assert "Caption the image in French." in outs


def test_render_vqa_example():
    out = F.render_template("vqa", "de", {"QUESTION": "What color is the car?"}, pool=T.VQA_TEMPLATES[:1])
    assert out == "What color is the car?. Short English answer:"


def test_render_vqg():
    out = F.render_template("vqg", "de", {"ANSWER": "dog"}, random.Random(1))
    assert "dog" in out and "German" in out and "$" not in out


def test_render_missing_slot():
    with pytest.raises(KeyError):
        F.render_template("vqa", "en", {})


# ---------------------------------------------------------------- localization

def test_vqav2_answer_never_sent_to_mt():
    spy = RecordingMT(MockMT())
    record = rec("vqav2", question="What color is the car?", answer="purple")
    ex = [F.localize(it, "de", spy, rng=random.Random(0)) for it in F.derive_task_examples(record)]
    assert "purple" not in spy.translated_texts
    assert "What color is the car?" in spy.translated_texts
    vqa = ex[0]
    assert vqa.target == "purple"
    assert "What color is the car? [de]" in vqa.prompt


def test_english_caption_makes_no_mt_calls():
    spy = RecordingMT(MockMT())
    (it,) = F.derive_task_examples(rec("mscoco", caption="a dog on a sofa"))
    ex = F.localize(it, "en", spy)
    assert spy.calls == []
    assert ex.target == "a dog on a sofa"


def test_french_caption_uses_translated_pool():
    mt = MockMT()
    bank = F.TemplateBank(mt)
    (it,) = F.derive_task_examples(rec("mscoco", caption="caption"))
    pool = bank.caption_pool("fr")
    prompts = set()
    for s in range(100):
        ex = F.localize(it, "fr", mt, bank, random.Random(s))
        assert ex.target == "caption [fr]"
        assert ex.prompt in {T.fill(t, {"LANGUAGE": "French"}) for t in pool}
        prompts.add(ex.prompt)
    assert "Caption the image. [fr]" in prompts


def test_llava_answers_are_translated():
    spy = RecordingMT(MockMT())
    (it,) = F.derive_task_examples(rec("llava_conv", turns=[{"question": "What?", "answer": "A cat."}]))
    ex = F.localize(it, "es", spy)
    assert ex.prompt == "What? [es]" and ex.target == "A cat. [es]"


def test_aokvqa_answers_and_rationales_untouched():
    spy = RecordingMT(MockMT())
    record = rec("aokvqa", question="Why?", answer="rain", rationales=["Clouds are dark.", "b", "c"])
    for it in F.derive_task_examples(record):
        ex = F.localize(it, "en", spy)
        assert "$" not in ex.prompt and "$" not in ex.target
    assert spy.calls == []
    with pytest.raises(ValueError):
        F.localize(F.derive_task_examples(record)[0], "de", spy)


def test_unsupported_language_named():
    (it,) = F.derive_task_examples(rec("mscoco", caption="c"))
    with pytest.raises(ValueError, match="'la'"):
        F.localize(it, "la", MockMT())


# ---------------------------------------------------------------- mixing

def _examples(n, prefix, image_prefix="img"):
    return [F.InstructionExample(f"{prefix}:{k}", "mscoco", "caption", "en", "p", "t", [f"{image_prefix}{k % 5}"],
                                 f"{prefix}:{k}") for k in range(n)]


def test_build_mix_exclusion_and_conservation():
    a, b = _examples(20, "a"), _examples(10, "b", "other")
    mix, manifest = F.build_mix([a, b], eval_exclusion={"img3"}, seed=0)
    assert manifest["excluded_dropped"] == 4
    assert manifest["total"] == len(mix) == 30 - 4
    assert all("img3" not in ex.image_ids for ex in mix)
    assert sum(manifest["per_task"].values()) == manifest["total"]


def test_build_mix_deterministic_bytes(tmp_path):
    a, b = _examples(20, "a"), _examples(10, "b")
    m1, _ = F.build_mix([a, b], seed=7)
    m2, _ = F.build_mix([b, a], seed=7)
    F.write_mix(m1, tmp_path / "1.jsonl")
    F.write_mix(m2, tmp_path / "2.jsonl")
    assert (tmp_path / "1.jsonl").read_bytes() == (tmp_path / "2.jsonl").read_bytes()
    assert F.read_mix(tmp_path / "1.jsonl") == m1
    m3, _ = F.build_mix([a, b], seed=8)
    assert [e.example_id for e in m3] != [e.example_id for e in m1]


def test_empty_mix_warns(caplog):
    with caplog.at_level("WARNING"):
        mix, manifest = F.build_mix([[]])
    assert mix == [] and manifest["total"] == 0 and "empty" in caplog.text


def _toy_records(tmp_path):
    paths = write_toy_corpora(tmp_path / "toy")
    records = {ds: F.read_records(paths[ds], ds) for ds in F.DATASETS}
    exclusion = set(paths["exclusion"].read_text().split())
    return records, exclusion


DIST = {"en": 0.4, "de": 0.2, "fr": 0.2, "zh": 0.2}


def test_forge_pipeline_invariants(tmp_path):
    records, exclusion = _toy_records(tmp_path)
    spy = RecordingMT(MockMT())
    mix, manifest = F.forge(records, F.LanguageDistribution(DIST), spy, seed=0, eval_exclusion=exclusion,
                            capfilt_min_occurrences=2)
    assert manifest["excluded_dropped"] > 0
    assert manifest["total"] == sum(manifest["per_source_derived"].values()) - manifest["excluded_dropped"]
    assert not any(set(ex.image_ids) & exclusion for ex in mix)
    answers = {r.payload["answer"] for ds in ("vqav2", "aokvqa") for r in records[ds]}
    assert not answers & set(spy.translated_texts)
    for ex in mix:
        assert not T.has_placeholder(ex.prompt) and "$" not in ex.prompt
        if ex.task == "vqa" and ex.dataset in ("vqav2", "aokvqa"):
            src = next(r for r in records[ex.dataset] if r.ref == ex.source)
            assert ex.target == src.payload["answer"]
        if ex.dataset == "aokvqa":
            assert ex.language == "en"
    counts = manifest["per_source_derived"]
    assert counts["vqav2"] == 2 * len(records["vqav2"])
    assert counts["aokvqa"] == 6 * len(records["aokvqa"])


def test_forge_deterministic_and_parallel_safe(tmp_path):
    records, exclusion = _toy_records(tmp_path)
    dist = F.LanguageDistribution(DIST)
    a, ma = F.forge(records, dist, MockMT(), seed=1, eval_exclusion=exclusion, capfilt_min_occurrences=2)
    b, mb = F.forge(records, dist, MockMT(), seed=1, eval_exclusion=exclusion, capfilt_min_occurrences=2, workers=4)
    assert [e.to_json() for e in a] == [e.to_json() for e in b]
    assert ma == mb


def test_read_records_majority_answer(tmp_path):
    p = tmp_path / "vqa.jsonl"
    p.write_text(json.dumps({"image_id": 1, "question": "q?", "answers": ["b", "a", "a"]}) + "\n")
    (r,) = F.read_records(p, "vqav2")
    assert r.payload["answer"] == "a" and r.image_id == "1"


# ---------------------------------------------------------------- HTTP MT

class _Handler(BaseHTTPRequestHandler):
    fail = 0
    hits = 0

    def do_POST(self):
        type(self).hits += 1
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.path != "/translate" or type(self).fail:
            type(self).fail = max(0, type(self).fail - 1)
            self.send_response(503)
            self.end_headers()
            self.wfile.write(b"busy")
            return
        out = json.dumps({"translations": [f"{t}@{body['tgt']}" for t in body["texts"]]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    _Handler.fail = 0
    _Handler.hits = 0
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()


def test_http_mt_round_trip(server):
    mt = HttpMT(server, retries=0)
    assert mt.translate(["a", "b"], "en", "de") == ["a@de", "b@de"]


def test_http_mt_retries_then_succeeds(server):
    _Handler.fail = 2
    mt = HttpMT(server, retries=2, backoff=0.0)
    assert mt.translate(["x"], "en", "fr") == ["x@fr"]
    assert _Handler.hits == 3


def test_http_mt_non_200_raises(server):
    _Handler.fail = 10
    mt = HttpMT(server, retries=1, backoff=0.0)
    with pytest.raises(MTError, match="503"):
        mt.translate(["x"], "en", "fr")
    assert _Handler.hits == 2


def test_http_mt_needs_endpoint(monkeypatch):
    monkeypatch.delenv("MVLM_MT_ENDPOINT", raising=False)
    with pytest.raises(MTError):
        HttpMT()


def test_mock_mt_length_and_determinism():
    mt = MockMT()
    texts = ["a", "b", "c"]
    assert mt.translate(texts, "en", "de") == mt.translate(texts, "en", "de") == ["a [de]", "b [de]", "c [de]"]
