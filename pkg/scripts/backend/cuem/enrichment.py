"""Image-enriched retrieval: caption, similar-image search, tag ranking, tag search."""
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS

from .errors import BackendUnavailable, EnrichmentEmpty, NoImage, PreconditionError, UnknownImage
from .models import DocumentSource, ImageContext, ImageTag, TagOrigin, tag_sort_key
from .utils import tokenize

logger = logging.getLogger(__name__)

ORIGIN_PRIORITY = {
    TagOrigin.annotated: 3,
    TagOrigin.interaction: 2,
    TagOrigin.extracted: 1,
}


@dataclass(frozen=True)
class InteractionRecord:
    query: str
    image_id: str
    timestamp: Optional[str] = None


def load_interaction_log(path):
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                records.append(InteractionRecord(str(raw["query"]), str(raw["image_id"]), raw.get("timestamp")))
            except (ValueError, KeyError, TypeError) as e:
                logger.warning("Skipping malformed interaction log line %d in %s: %s", lineno, path, e)
    return records


def extract_keywords(doc, max_k):
    if max_k < 1:
        raise PreconditionError("max_k must be >= 1")
    counts = Counter(t for t in tokenize(doc.body) if t not in ENGLISH_STOP_WORDS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [term for term, _ in ranked[:max_k]]


def extract_tags(image, similar, interaction_log, annotated_threshold, keyword_count=5, use_titles=False):
    """Rank tags from interaction logs, similar-doc keywords and annotated tags.

    weight = origin priority x source score, where the source score is the
    similarity for annotated tags, the relative log frequency for interaction
    tags and similarity / (keyword rank + 1) for extracted ones. A tag seen
    under several origins keeps the highest-priority one.
    """
    if not 0.0 <= annotated_threshold <= 1.0:
        raise PreconditionError("annotated_threshold must be in [0, 1]")

    candidates = []
    for doc, sim in similar:
        if sim >= annotated_threshold:
            for tag in doc.tags:
                candidates.append((tag, ORIGIN_PRIORITY[TagOrigin.annotated] * sim, TagOrigin.annotated))

    hits = Counter(r.query.strip().casefold() for r in interaction_log if r.image_id == image.id and r.query.strip())
    if hits:
        top = max(hits.values())
        for q, count in hits.items():
            candidates.append((q, ORIGIN_PRIORITY[TagOrigin.interaction] * count / top, TagOrigin.interaction))

    for doc, sim in similar:
        for rank, kw in enumerate(extract_keywords(doc, keyword_count)):
            candidates.append((kw, ORIGIN_PRIORITY[TagOrigin.extracted] * sim / (rank + 1), TagOrigin.extracted))
        if use_titles and doc.title.strip():
            candidates.append((doc.title, ORIGIN_PRIORITY[TagOrigin.extracted] * sim, TagOrigin.extracted))

    best = {}
    for tag, weight, origin in candidates:
        tag = " ".join(tag.casefold().split())
        if not tag:
            continue
        key = (ORIGIN_PRIORITY[origin], weight)
        if tag not in best or key > best[tag][0]:
            best[tag] = (key, origin)

    tags = [ImageTag(tag, weight, origin) for tag, ((_, weight), origin) in best.items()]
    return sorted(tags, key=tag_sort_key)


def _merge_by_id(docs):
    kept = {}
    for doc in docs:
        if doc.id not in kept or doc.retrieval_score > kept[doc.id].retrieval_score:
            kept[doc.id] = doc
    return sorted(kept.values(), key=lambda d: (-d.retrieval_score, d.id))


def tag_text_search(tags, user_text, k, backends, m=3, domain_filter=None, max_workers=4, warnings=None):
    """One search per top-`m` tag, the tag alone as the query.

    `user_text` only shows up in the log line; tags are never appended to it.
    Raises BackendUnavailable when every tag search failed.
    """
    if k < 1:
        raise PreconditionError("k must be >= 1")
    queries = [t.tag for t in tags[:m]]
    if not queries:
        return []
    logger.debug("Tag search for %r over %s", user_text, queries)

    def _one(q):
        try:
            return backends.text_search(q, k, domain_filter), None
        except BackendUnavailable as e:
            return None, f"tag search {q!r} failed: {e}"

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        outcomes = list(pool.map(_one, queries))

    failures = [w for _, w in outcomes if w]
    for w in failures:
        logger.warning(w)
        if warnings is not None:
            warnings.append(w)
    if len(failures) == len(queries):
        raise BackendUnavailable("text_search", "all tag searches failed")
    docs = [d.with_source(DocumentSource.web) for found, _ in outcomes if found for d in found]
    return _merge_by_id(docs)[:k]


def enrich(query, cfg, backends, interaction_log=(), warnings=None, domain_filter=None, use_titles=False):
    if not query.has_image:
        raise NoImage("enrichment needs an image")
    warnings = [] if warnings is None else warnings
    image = query.image

    def _caption():
        return backends.describe_image(image)

    def _similar():
        return backends.similar_image_search(image, cfg.k_top_docs)

    with ThreadPoolExecutor(max_workers=2) as pool:
        caption_f = pool.submit(_caption)
        similar_f = pool.submit(_similar)
        caption = similar = None
        try:
            caption = caption_f.result()
        except (BackendUnavailable, UnknownImage) as e:
            logger.warning("Caption unavailable for %s: %s", image.id, e)
            warnings.append(f"caption unavailable: {e}")
        try:
            similar = similar_f.result()
        except (BackendUnavailable, UnknownImage) as e:
            logger.warning("Similar-image search unavailable for %s: %s", image.id, e)
            warnings.append(f"similar-image search unavailable: {e}")

    tags = extract_tags(
        image,
        similar or [],
        interaction_log,
        cfg.annotated_tag_similarity_threshold,
        keyword_count=cfg.keyword_count,
        use_titles=use_titles,
    )

    tag_docs = None
    if tags and cfg.tag_search_count > 0:
        try:
            tag_docs = tag_text_search(
                tags, query.text, cfg.k_top_docs, backends,
                m=cfg.tag_search_count, domain_filter=domain_filter,
                max_workers=cfg.max_workers, warnings=warnings,
            )
        except BackendUnavailable as e:
            warnings.append(f"tag search unavailable: {e}")

    if caption is None and similar is None and tag_docs is None:
        raise EnrichmentEmpty(f"every enrichment sub-task failed for image {image.id}")
    return ImageContext(caption or "", tuple(tags), tuple(similar or ()), tuple(tag_docs or ()))
