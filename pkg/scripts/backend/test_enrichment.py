from dataclasses import replace
from unittest.mock import MagicMock

import pytest

from scripts.backend.cuem.enrichment import (
    InteractionRecord,
    enrich,
    extract_keywords,
    extract_tags,
    load_interaction_log,
    tag_text_search,
)
from scripts.backend.cuem.errors import BackendUnavailable, EnrichmentEmpty, NoImage
from scripts.backend.cuem.models import Document, DocumentSource, ImageTag, TagOrigin, new_query


def _doc(doc_id, body, tags=(), title=""):
    return Document(doc_id, title, body, "image_index", tags=tags)


def test_keywords_skip_stopwords_and_rank_by_count():
    doc = _doc("d", "The moth and the moth and a leaf with yellow spots on the leaf of a moth")
    assert extract_keywords(doc, 3) == ["moth", "leaf", "spots"]


def test_tag_weights_follow_origin_priority(images):
    image = images.resolve("bird")
    similar = [(_doc("s1", "moth wing", tags=("Erebia Moth",)), 0.95), (_doc("s2", "sparrow branch"), 0.6)]
    log = [InteractionRecord("erebia moth", "bird"), InteractionRecord("erebia moth", "bird"),
           InteractionRecord("spotted moth", "bird"), InteractionRecord("cabin", "cabin")]
    tags = {t.tag: t for t in extract_tags(image, similar, log, annotated_threshold=0.9)}

    # annotated beats the same tag from the log
    assert tags["erebia moth"].origin is TagOrigin.annotated
    assert tags["erebia moth"].weight == pytest.approx(3 * 0.95)
    assert tags["spotted moth"].origin is TagOrigin.interaction
    assert tags["spotted moth"].weight == pytest.approx(2 * 0.5)
    assert tags["moth"].weight == pytest.approx(0.95)
    assert tags["wing"].weight == pytest.approx(0.95 / 2)
    assert "cabin" not in tags


def test_annotated_tags_need_the_similarity_threshold(images):
    image = images.resolve("bird")
    similar = [(_doc("s1", "x", tags=("rare tag",)), 0.85)]
    tags = extract_tags(image, similar, [], annotated_threshold=0.9)
    assert "rare tag" not in {t.tag for t in tags}


def test_titles_become_extracted_tags_on_request(images):
    image = images.resolve("bird")
    similar = [(_doc("s1", "body words", title="Erebia Moth Photo"), 0.8)]
    assert "erebia moth photo" not in {t.tag for t in extract_tags(image, similar, [], 0.9)}
    with_titles = extract_tags(image, similar, [], 0.9, use_titles=True)
    assert "erebia moth photo" in {t.tag for t in with_titles}


def test_tag_search_uses_the_tag_alone(backends):
    tags = [ImageTag("erebia moth", 3.0, "annotated"), ImageTag("sparrow", 1.0, "extracted")]
    spy = MagicMock(wraps=backends.text_search_backend)
    backends.text_search_backend = spy
    docs = tag_text_search(tags, "what bird is this", 5, backends, m=2)
    queries = [c.args[0] for c in spy.search.call_args_list]
    assert sorted(queries) == ["erebia moth", "sparrow"]
    assert all(d.source is DocumentSource.web for d in docs)
    assert "web-erebia" in {d.id for d in docs}


def test_tag_search_raises_when_every_search_fails(backends):
    backends.text_search_backend = MagicMock()
    backends.text_search_backend.search.side_effect = BackendUnavailable("text_search", "down")
    warnings = []
    with pytest.raises(BackendUnavailable):
        tag_text_search([ImageTag("moth", 1.0, "extracted")], "", 5, backends, warnings=warnings)
    assert warnings


def test_enrich_fixture_bird(cfg, backends, images, interactions):
    query = new_query("what bird is this", images.resolve("bird"))
    ctx = enrich(query, cfg, backends, interactions)
    assert ctx.description == "a small brown bird on a branch"
    assert [d.id for d, _ in ctx.similar_docs] == ["img-001", "img-002", "img-003"]
    assert ctx.tags[0].tag in ("erebia moth", "moth")
    assert "web-erebia" in {d.id for d in ctx.tag_docs}
    assert ctx.documents()[0].id == "img-001"


def test_enrich_needs_an_image(cfg, backends):
    with pytest.raises(NoImage):
        enrich(new_query("text only"), cfg, backends)


def test_enrich_degrades_when_caption_fails(cfg, backends, images):
    backends.describer = MagicMock()
    backends.describer.describe_image.side_effect = BackendUnavailable("multimodal_describer")
    warnings = []
    ctx = enrich(new_query("q", images.resolve("bird")), cfg, backends, warnings=warnings)
    assert ctx.description == ""
    assert ctx.similar_docs
    assert any("caption" in w for w in warnings)


def test_enrich_empty_when_everything_fails(cfg, backends, images):
    down = MagicMock(side_effect=BackendUnavailable("x"))
    backends.describer = MagicMock(describe_image=down)
    backends.image_search = MagicMock(search=down)
    with pytest.raises(EnrichmentEmpty):
        enrich(new_query("q", images.resolve("bird")), replace(cfg, tag_search_count=0), backends)


def test_malformed_interaction_lines_are_skipped(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text('{"query": "moth", "image_id": "bird"}\nnot json\n{"query": "x"}\n', encoding="utf-8")
    assert load_interaction_log(path) == [InteractionRecord("moth", "bird")]
