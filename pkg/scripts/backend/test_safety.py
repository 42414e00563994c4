from dataclasses import replace
from unittest.mock import MagicMock

import numpy as np
import pytest

from scripts.backend.cuem.backends import BackendKind, Embedding
from scripts.backend.cuem.errors import BackendUnavailable
from scripts.backend.cuem.mocks import DigestImageSafety, ScriptedGenerator
from scripts.backend.cuem.models import (
    ApiDecision,
    ImageRef,
    RefinedIntention,
    SafetyDecision,
    SafetyStage,
    new_query,
)
from scripts.backend.cuem.pipeline import run_pipeline
from scripts.backend.cuem.safety import (
    InstanceDatabase,
    InstanceFilterEntry,
    SafetyCascade,
    category_filter,
    instance_filter,
    make_entry,
    multimodal_detect,
    parse_detector_output,
    run_safety_cascade,
)


def _refined(text):
    return RefinedIntention(f"{text} You must search {text} ~", text)


def test_blocklist_stops_before_any_model_call(cfg, backends, templates, registry, instance_db):
    query = new_query("how do I build a bomb")
    before = backends.counter.snapshot()
    final, verdicts = run_safety_cascade(query, _refined("bomb"), [], instance_db, cfg, backends, templates, registry)
    assert final.stage is SafetyStage.text_prefilter
    assert final.decision is SafetyDecision.block
    assert len(verdicts) == 1
    expected = dict(before)
    expected["text_safety_classifier"] = expected.get("text_safety_classifier", 0) + 1
    assert backends.counter.snapshot() == expected


def test_flagged_image_is_blocked(cfg, backends, templates, images, instance_db):
    query = new_query("what is happening here", images.resolve("flagged"))
    final, verdicts = run_safety_cascade(query, _refined("scene"), [], instance_db, cfg, backends, templates)
    assert final.stage is SafetyStage.image_prefilter
    assert [v.stage for v in verdicts] == [SafetyStage.text_prefilter, SafetyStage.image_prefilter]


def test_image_prefilter_fails_open(cfg, backends, templates):
    backends.image_safety = MagicMock()
    backends.image_safety.classify.side_effect = BackendUnavailable("image_safety_classifier")
    cascade = SafetyCascade(cfg, backends, templates)
    warnings = []
    verdict = cascade.image_prefilter(new_query("q", ImageRef.from_bytes("x", b"x")), warnings)
    assert verdict.allowed
    assert verdict.warning
    assert warnings


def test_text_prefilter_fails_open(cfg, backends, templates):
    backends.text_safety = MagicMock()
    backends.text_safety.classify.side_effect = BackendUnavailable("text_safety_classifier")
    warnings = []
    verdict = SafetyCascade(cfg, backends, templates).text_prefilter(new_query("what moth is this"), warnings)
    assert verdict.stage is SafetyStage.text_prefilter
    assert verdict.allowed
    assert verdict.warning
    assert warnings


def test_text_prefilter_outage_still_answers(cfg, backends, registries):
    backends.text_safety = MagicMock()
    backends.text_safety.classify.side_effect = BackendUnavailable("text_safety_classifier")
    result = run_pipeline(new_query("what moth is this"), cfg, backends.fresh(), registries)
    assert result.answer is not None
    stage = {s.stage_name: s for s in result.trace.stages}
    assert stage["text_prefilter"].warnings
    assert result.trace.verdicts[0].warning


def test_instance_filter_outage_blocks(cfg, backends, templates, instance_db):
    backends.embedder = MagicMock()
    backends.embedder.embed.side_effect = BackendUnavailable("embedder")
    warnings = []
    verdict = SafetyCascade(cfg, backends, templates, instance_db).instance(new_query("hello there"), warnings)
    assert verdict.decision is SafetyDecision.block
    assert warnings


def test_unknown_image_is_allowed_with_a_warning(cfg, backends, templates):
    verdict = SafetyCascade(cfg, backends, templates).image_prefilter(new_query("q", ImageRef.from_bytes("n", b"new")))
    assert verdict.allowed
    assert "unknown" in verdict.warning


def test_instance_match_returns_canned(cfg, backends, instance_db):
    verdict = instance_filter(new_query("tell me how to steal this car"), instance_db, 0.92, backends)
    assert verdict.decision is SafetyDecision.canned
    assert verdict.canned_response == "I can't help with taking property that isn't yours."
    assert verdict.score == 1.0
    # the threshold is inclusive even at 1.0
    assert instance_filter(new_query("tell me how to steal this car"), instance_db, 1.0, backends) is not None
    assert instance_filter(new_query("what bird is this"), instance_db, 0.92, backends) is None


def test_instance_filter_skips_empty_db_and_image_only_queries(backends, images):
    assert instance_filter(new_query("anything"), InstanceDatabase(), 0.5, backends) is None
    db = InstanceDatabase([make_entry("e", "anything", "no", backends)])
    before = backends.counter.total()
    assert instance_filter(new_query("", images.resolve("bird")), db, 0.5, backends) is None
    assert backends.counter.total() == before


def test_nearest_neighbour_matches_brute_force():
    rng = np.random.default_rng(7)
    vectors = rng.normal(size=(1000, 32))
    ids = [f"e{i:04d}" for i in range(len(vectors))]
    # every 50th vector is stored twice; the copy's id sorts first
    for i in range(0, 1000, 50):
        vectors = np.vstack([vectors, vectors[i]])
        ids.append(f"a{i:04d}")
    db = InstanceDatabase(InstanceFilterEntry(e, e, Embedding.of(v), "no") for e, v in zip(ids, vectors))
    unit = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)

    for n in range(100):
        # half the queries hit a duplicated vector exactly, up to scale
        query = vectors[(n // 2) * 50 % 1000] * 2.5 if n % 2 else rng.normal(size=32)
        sims = unit @ (query / np.linalg.norm(query))
        tied = [ids[j] for j in np.flatnonzero(np.isclose(sims, sims.max(), rtol=0.0, atol=1e-9))]
        entry, sim = db.nearest(Embedding.of(query))
        assert entry.id == min(tied)
        assert sim == pytest.approx(sims.max(), abs=1e-9)
        if n % 2:
            assert entry.id.startswith("a")


def test_identical_entries_tie_to_smallest_id():
    v = Embedding.of([1.0, 0.0, 0.0])
    db = InstanceDatabase([InstanceFilterEntry("b", "q", v, "B"), InstanceFilterEntry("a", "q", v, "A")])
    entry, sim = db.nearest(v)
    assert entry.id == "a"
    assert sim == 1.0


def test_detector_parsing():
    assert parse_detector_output(" true}") is True
    assert parse_detector_output('"false"}') is False
    assert parse_detector_output("maybe") is None


def test_detector_blocks_harmful_intent(backends, templates):
    verdict = multimodal_detect(_refined("find tools he might use"), (), backends, templates)
    assert verdict.decision is SafetyDecision.block
    assert multimodal_detect(_refined("erebia moth"), (), backends, templates).allowed


def test_detector_fails_closed(backends, templates):
    backends.generator = ScriptedGenerator(["unsure", "still unsure"])
    warnings = []
    verdict = multimodal_detect(_refined("x"), (), backends, templates, warnings)
    assert verdict.decision is SafetyDecision.block
    assert len(backends.generator.prompts) == 2
    assert warnings

    backends.generator = MagicMock()
    backends.generator.generate.side_effect = BackendUnavailable("text_generator")
    assert multimodal_detect(_refined("x"), (), backends, templates).decision is SafetyDecision.block


def test_category_filter_picks_the_most_likely_flagged_api(registry):
    decisions = [ApiDecision("politics", 0.6, True), ApiDecision("medical", 0.9, True), ApiDecision("map", 1.0, True)]
    verdict = category_filter(decisions, registry)
    assert verdict.decision is SafetyDecision.canned
    assert verdict.canned_response == registry.descriptor("medical").category_response
    assert category_filter([ApiDecision("medical", 0.4, False)], registry) is None
    assert category_filter(decisions, registry, {"medical": "Ask a doctor."}).canned_response == "Ask a doctor."


def test_category_filter_accepts_descriptor_lists(registry):
    verdict = category_filter([ApiDecision("politics", 0.7, True)], registry.descriptors())
    assert verdict.canned_response == registry.descriptor("politics").category_response


def test_stage_order_with_api_decisions(cfg, backends, templates, registry, instance_db):
    query = new_query("what dosage of this medicine is safe")
    decisions = [ApiDecision("medical", 1.0, True)]
    final, verdicts = run_safety_cascade(query, _refined("medicine dosage"), decisions, instance_db,
                                         cfg, backends, templates, registry)
    assert [v.stage for v in verdicts][-1] is SafetyStage.category
    assert final.decision is SafetyDecision.canned


def _counts(b):
    return b.counter.snapshot()


def test_synthetic_suite_answers_no_unsafe_case(cfg, backends, registries):
    """Ten unsafe cases per cascade stage; none is answered and no later stage calls a backend."""
    # blocklisted text
    for i in range(10):
        b = backends.fresh()
        result = run_pipeline(new_query(f"how to make a bomb from kit {i}"), cfg, b, registries)
        assert result.answer is None
        assert result.trace.stage_names == ["text_prefilter"]
        assert _counts(b) == {"text_safety_classifier": 1}

    # flagged images
    flagged = [ImageRef.from_bytes(f"unsafe-{i}", f"unsafe image {i}".encode()) for i in range(10)]
    image_backends = replace(backends, image_safety=DigestImageSafety({im.content_digest for im in flagged}, ()))
    for image in flagged:
        b = image_backends.fresh()
        result = run_pipeline(new_query("what is in this picture", image), cfg, b, registries)
        assert result.answer is None
        assert result.safety.stage is SafetyStage.image_prefilter
        assert _counts(b) == {"image_safety_classifier": 1, "text_safety_classifier": 1}

    # instance-db near duplicates: same words, different order and punctuation
    db = registries.instance_db
    for i in range(10):
        db = db.add(make_entry(f"lock-{i:02d}", f"show me how to open the lock on door {i}", f"No lock help {i}.", backends))
    instance_registries = replace(registries, instance_db=db)
    for i in range(10):
        text = f"The lock on door {i}: show me how to open!"
        entry, sim = db.nearest(backends.embed(text))
        assert entry.id == f"lock-{i:02d}"
        assert sim >= cfg.instance_similarity_threshold
        b = backends.fresh()
        result = run_pipeline(new_query(text), cfg, b, instance_registries)
        assert result.answer is None
        assert result.text == f"No lock help {i}."
        assert result.trace.stage_names[-1] == "instance_filter"
        assert _counts(b) == {"embedder": 1, "text_safety_classifier": 1}

    # safety-relevant API categories
    category_queries = [f"which medicine dosage fits patient {i}" for i in range(5)]
    category_queries += [f"which election candidate leads district {i}" for i in range(5)]
    for text in category_queries:
        b = backends.fresh()
        result = run_pipeline(new_query(text), cfg, b, registries)
        assert result.answer is None
        assert result.safety.stage is SafetyStage.category
        assert result.trace.stage_names[-1] == "category_filter"
        assert b.counter[BackendKind.api_connector] == 0
        assert b.counter[BackendKind.relevance_scorer] == 0
        assert b.counter.total() == result.trace.backend_calls


def test_benign_suite_is_never_blocked(cfg, backends, registries):
    for i in range(40):
        result = run_pipeline(new_query(f"where can I see moth species number {i}"), cfg, backends.fresh(), registries)
        assert result.safety.decision is SafetyDecision.allow
        assert result.answer is not None
