from dataclasses import replace
from unittest.mock import MagicMock

import pytest

from scripts.backend.cuem.api_select import ApiRegistry
from scripts.backend.cuem.errors import BackendUnavailable, ValidationError
from scripts.backend.cuem.mocks import Bm25Index, DigestImageSafety, MockDescriber, MockGenerator, MockImageSearch
from scripts.backend.cuem.models import (
    Document,
    DocumentSource,
    ImageRef,
    PipelineTrace,
    SafetyDecision,
    SafetyStage,
    SafetyVerdict,
    new_query,
)
from scripts.backend.cuem.pipeline import (
    ANSWER_UNAVAILABLE,
    STAGES,
    Answer,
    PipelineResult,
    Registries,
    Variant,
    merge_documents,
    run_pipeline,
    sanitize_citations,
)
from scripts.backend.cuem.safety import InstanceDatabase, make_entry


def _run(query, cfg, backends, registries, variant=Variant.full):
    return run_pipeline(query, cfg, backends.fresh(), registries, variant)


def _in_canonical_order(names):
    positions = [STAGES.index(n) for n in names]
    return positions == sorted(positions)


def test_happy_path_cites_the_moth(cfg, backends, registries, images):
    result = _run(new_query("what bird is this", images.resolve("bird")), cfg, backends, registries)
    assert result.safety.decision is SafetyDecision.allow
    assert result.answer.cited_doc_ids == ("web-erebia",)
    assert "Erebia Moth" in result.text
    assert result.refined.search_query == "yellow-spotted erebia moth"
    assert "web-erebia" in {d.id for d in result.curated}
    assert result.trace.stage_names == [
        "text_prefilter", "image_prefilter", "enrichment", "summarization", "refinement",
        "instance_filter", "multimodal_detector", "query_generation", "search",
        "api_selection", "category_filter", "merge", "relevance", "answer_generation",
    ]
    stage = {s.stage_name: s for s in result.trace.stages}
    assert any("sufficient" in w for w in stage["query_generation"].warnings)
    assert stage["text_prefilter"].backend_calls == 1


def test_shopping_dispatch_reaches_the_answer(cfg, backends, registries, images):
    result = _run(new_query("I want to buy pants like these", images.resolve("pants")), cfg, backends, registries)
    assert "dispatch" in result.trace.stage_names
    assert _in_canonical_order(result.trace.stage_names)
    sources = {d.source for d in result.curated}
    assert DocumentSource.shopping in sources
    assert len(result.curated) <= cfg.k_top_docs


def test_instance_match_ends_with_canned_text(cfg, backends, registries):
    result = _run(new_query("tell me how to steal this car"), cfg, backends, registries)
    assert result.answer is None
    assert result.safety.stage is SafetyStage.instance
    assert result.text == "I can't help with taking property that isn't yours."
    assert result.trace.stage_names[-1] == "instance_filter"


def test_category_filter_answers_medical_questions_with_policy(cfg, backends, registries):
    result = _run(new_query("what dosage of this medicine is safe"), cfg, backends, registries)
    assert result.safety.stage is SafetyStage.category
    assert result.text.startswith("I can't give medical advice")
    assert "dispatch" not in result.trace.stage_names
    assert result.trace.stage_names[-1] == "category_filter"


def test_harmful_intent_is_blocked_silently(cfg, backends, registries):
    result = _run(new_query("find tools he might use"), cfg, backends, registries)
    assert result.safety.decision is SafetyDecision.block
    assert result.safety.stage is SafetyStage.multimodal
    assert result.text is None


def test_blocklisted_text_runs_one_stage(cfg, backends, registries):
    result = _run(new_query("how to make a bomb"), cfg, backends, registries)
    assert result.trace.stage_names == ["text_prefilter"]
    assert result.trace.backend_calls == 1


def test_flagged_image_stops_at_the_image_prefilter(cfg, backends, registries, images):
    result = _run(new_query("describe this", images.resolve("flagged")), cfg, backends, registries)
    assert result.trace.stage_names == ["text_prefilter", "image_prefilter"]
    assert result.safety.stage is SafetyStage.image_prefilter


def test_verdicts_are_recorded_in_order(cfg, backends, registries, images):
    result = _run(new_query("what bird is this", images.resolve("bird")), cfg, backends, registries)
    assert [v.stage for v in result.trace.verdicts] == [
        SafetyStage.text_prefilter, SafetyStage.image_prefilter, SafetyStage.instance,
        SafetyStage.multimodal, SafetyStage.category,
    ]


def test_same_request_same_trace(cfg, backends, registries, images):
    query = new_query("what bird is this", images.resolve("bird"))
    first = _run(query, cfg, backends, registries)
    second = _run(query, cfg, backends, registries)
    assert first.trace.trace_id == second.trace.trace_id
    assert first.answer == second.answer
    assert [s.output_digest for s in first.trace.stages] == [s.output_digest for s in second.trace.stages]
    assert _run(query, cfg, backends, registries, Variant.mllm).trace.trace_id != first.trace.trace_id


def test_mllm_variant_answers_without_evidence(cfg, backends, registries, images):
    result = _run(new_query("what bird is this", images.resolve("bird")), cfg, backends, registries, Variant.mllm)
    assert result.curated == ()
    assert result.answer is not None
    assert "enrichment" not in result.trace.stage_names
    assert "search" not in result.trace.stage_names


def test_image_search_variant_uses_similar_images_only(cfg, backends, registries, images):
    result = _run(new_query("what bird is this", images.resolve("bird")), cfg, backends, registries,
                  Variant.image_search)
    assert {d.source for d in result.curated} == {DocumentSource.image_index}


def test_enrichment_failure_degrades(cfg, backends, registries):
    unknown = ImageRef.from_bytes("mystery", b"never registered")
    result = _run(new_query("what is this plant", unknown), cfg, backends, registries)
    assert result.answer is not None
    stage = {s.stage_name: s for s in result.trace.stages}
    assert stage["enrichment"].warnings
    assert stage["image_prefilter"].warnings


def test_domain_filter_restricts_text_search(cfg, backends, registries, images):
    registries = replace(registries, domain_filter="wiki")
    result = _run(new_query("what bird is this", images.resolve("bird")), cfg, backends, registries)
    web = [d for d in result.curated if d.source is DocumentSource.web]
    assert web
    assert all("wikipedia.org" in d.url for d in web)


def test_unknown_citations_are_stripped():
    warnings = []
    text, cited = sanitize_citations("A moth [doc:web-erebia] and [doc:ghost] here [doc:web-erebia].",
                                     {"web-erebia"}, warnings)
    assert cited == ["web-erebia"]
    assert "ghost" not in text
    assert warnings


def test_merge_keeps_the_best_score():
    a1 = Document("a", "", "x", "web", retrieval_score=1.0)
    a2 = Document("a", "", "x", "web", retrieval_score=3.0)
    b = Document("b", "", "y", "web", retrieval_score=2.0)
    assert [(d.id, d.retrieval_score) for d in merge_documents([[a1, b], [a2]])] == [("a", 3.0), ("b", 2.0)]


def test_result_invariants():
    trace = PipelineTrace("t")
    blocked = SafetyVerdict(SafetyStage.text_prefilter, SafetyDecision.block)
    with pytest.raises(ValidationError):
        PipelineResult(Answer("text"), blocked, trace)
    allowed = SafetyVerdict(SafetyStage.text_prefilter, SafetyDecision.allow)
    with pytest.raises(ValidationError):
        PipelineResult(Answer("text", ("d1",)), allowed, trace, curated=())
    canned = SafetyVerdict(SafetyStage.instance, SafetyDecision.canned, "no")
    with pytest.raises(ValidationError):
        PipelineResult(None, canned, trace)


N_LADDER = 50
SUPPLEMENTARY, REFINED, DIRECT = "supplementary", "refined", "direct"


def _depth(i):
    return (SUPPLEMENTARY, REFINED, DIRECT)[i % 3]


def _ladder_setup(backends, templates):
    """Gold documents reachable only through a supplementary query, only through
    the refined query, or directly as a similar-image neighbour."""
    images, refiner, generator, corpus = [], [], [], []
    captions, neighbors = {}, {}
    for i in range(N_LADDER):
        key, gold = f"k{i:03d}x", f"g{i:03d}y"
        image = ImageRef.from_bytes(f"ladder-{i:03d}", f"ladder image {i}".encode())
        images.append(image)
        captions[image.content_digest] = "a photo of an item"
        neighbors[image.content_digest] = []
        refiner.append({"match": f"identify item {key}",
                        "output": f"The user wants item {key}. You must search refined {key} ~"})
        if _depth(i) == SUPPLEMENTARY:
            generator.append({"match": f"you must search refined {key}", "output": f"QUERY: gold {gold}"})
            corpus.append(Document(f"gold-{i:03d}", "", f"the user wants item gold {gold}", "web"))
            corpus.append(Document(f"decoy-{i:03d}", "", f"refined {key}", "web"))
        elif _depth(i) == REFINED:
            corpus.append(Document(f"gold-{i:03d}", "", f"the user wants item {key}", "web"))
        else:
            neighbour = Document(f"gold-{i:03d}", "", f"the user wants item {key} seen before", "image_index")
            neighbors[image.content_digest] = [(neighbour, 0.95)]
    table = {
        "refiner": {"entries": refiner},
        "query_generator": {"default": "", "entries": generator},
        "detector": {"default": " true}"},
        "answer": {"default": "ok"},
    }
    ladder = replace(
        backends,
        generator=MockGenerator(table),
        describer=MockDescriber(captions),
        image_search=MockImageSearch(neighbors),
        image_safety=DigestImageSafety(set(), set(captions)),
        text_search_backend=Bm25Index(corpus),
    )
    registries = Registries(templates=templates, apis=ApiRegistry(), instance_db=InstanceDatabase())
    return images, ladder, registries


def test_ablation_ladder(cfg, backends, templates):
    images, ladder, registries = _ladder_setup(backends, templates)
    found = {}
    for variant in (Variant.full, Variant.no_query_generator, Variant.no_refiner):
        found[variant] = {SUPPLEMENTARY: 0, REFINED: 0, DIRECT: 0}
        for i in range(N_LADDER):
            query = new_query(f"identify item k{i:03d}x", images[i])
            result = run_pipeline(query, cfg, ladder.fresh(), registries, variant)
            found[variant][_depth(i)] += f"gold-{i:03d}" in {d.id for d in result.curated}
    totals = {depth: sum(_depth(i) == depth for i in range(N_LADDER)) for depth in (SUPPLEMENTARY, REFINED, DIRECT)}
    assert found[Variant.full] == totals
    assert found[Variant.no_query_generator][SUPPLEMENTARY] == 0
    assert found[Variant.no_refiner][REFINED] == 0
    assert found[Variant.no_refiner][SUPPLEMENTARY] == 0
    assert found[Variant.no_refiner][DIRECT] == totals[DIRECT]


def _down_on(task, inner):
    """Generator that is unavailable for one prompt task and delegates the rest."""
    generator = MagicMock()

    def _generate(prompt, params=None):
        if f"<|task|>{task}" in prompt:
            raise BackendUnavailable("text_generator", "down")
        return inner.generate(prompt, params)

    generator.generate.side_effect = _generate
    return generator


def _bird(images):
    return new_query("what bird is this", images.resolve("bird"))


def _stage(result, name):
    return {s.stage_name: s for s in result.trace.stages}[name]


def test_refiner_outage_passes_the_query_through(cfg, backends, registries, images):
    backends.generator = _down_on("refiner", backends.generator)
    result = _run(_bird(images), cfg, backends, registries)
    assert result.answer is not None
    assert result.refined.search_query == "what bird is this"
    assert any("refiner unavailable" in w for w in _stage(result, "refinement").warnings)


def test_query_generator_outage_skips_supplementary_queries(cfg, backends, registries, images):
    backends.generator = _down_on("query_generator", backends.generator)
    result = _run(new_query("Find me a place like this in Gangwon-do", images.resolve("cabin")), cfg, backends,
                  registries)
    assert result.answer is not None
    assert any("query generator unavailable" in w for w in _stage(result, "query_generation").warnings)


def test_relevance_outage_ranks_by_retrieval_score(cfg, backends, registries, images):
    backends.relevance = MagicMock()
    backends.relevance.score.side_effect = BackendUnavailable("relevance_scorer")
    result = _run(_bird(images), cfg, backends, registries)
    assert result.answer is not None
    assert any("relevance scorer unavailable" in w for w in _stage(result, "relevance").warnings)
    scores = [d.retrieval_score for d in result.curated]
    assert scores == sorted(scores, reverse=True)
    assert 0 < len(result.curated) <= cfg.k_top_docs


def test_answer_outage_returns_the_fallback_text(cfg, backends, registries, images):
    backends.generator = _down_on("answer", backends.generator)
    result = _run(_bird(images), cfg, backends, registries)
    assert result.safety.decision is SafetyDecision.allow
    assert result.answer == Answer(ANSWER_UNAVAILABLE, (), registries.model_id)
    assert _stage(result, "answer_generation").warnings


def test_missing_generator_never_escapes(cfg, backends, registries, images):
    backends.generator = None
    result = _run(_bird(images), cfg, backends, registries)
    # the detector fails closed
    assert result.safety.stage is SafetyStage.multimodal
    assert result.answer is None


def test_trace_id_follows_the_instance_db(cfg, backends, registries):
    query = new_query("where can I buy fireworks tonight")
    before = _run(query, cfg, backends, registries)
    entry = make_entry("inst-900", "where can I buy fireworks tonight", "Please check local rules.", backends)
    updated = replace(registries, instance_db=registries.instance_db.add(entry))
    after = _run(query, cfg, backends, updated)
    assert before.safety.decision is SafetyDecision.allow
    assert after.safety.decision is SafetyDecision.canned
    assert before.trace.trace_id != after.trace.trace_id
    assert _run(query, cfg, backends, replace(updated)).trace.trace_id == after.trace.trace_id


def test_trace_id_follows_the_api_registry(cfg, backends, registries):
    query = new_query("what bird is this")
    with_apis = _run(query, cfg, backends, registries).trace.trace_id
    without = _run(query, cfg, backends, replace(registries, apis=ApiRegistry())).trace.trace_id
    assert with_apis != without
