"""End-to-end orchestration: retrieval, refinement, safety, curation and answer generation.

Every executed stage is appended to the request's PipelineTrace with digests of
its inputs and outputs, the number of backend calls it made and any
degradation warnings. A block or canned safety verdict ends the run.
"""
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

from .api_select import ApiRegistry, dispatch_selected, select_apis
from .enrichment import enrich
from .errors import BackendUnavailable, EnrichmentEmpty, PreconditionError, ValidationError
from .intent import (
    format_history,
    generate_queries,
    passthrough_intention,
    refine_intention,
    summarize_documents,
)
from .models import (
    Document,
    PipelineTrace,
    QueryOrigin,
    RefinedIntention,
    SafetyDecision,
    SafetyVerdict,
    SearchQuery,
    StageRecord,
    trace_append,
)
from .relevance import select_top_k, select_top_k_by_retrieval
from .safety import InstanceDatabase, SafetyCascade, final_verdict
from .templates import TemplateLibrary
from .utils import digest

logger = logging.getLogger(__name__)

STAGES = (
    "text_prefilter",
    "image_prefilter",
    "enrichment",
    "summarization",
    "refinement",
    "instance_filter",
    "multimodal_detector",
    "query_generation",
    "search",
    "api_selection",
    "category_filter",
    "dispatch",
    "merge",
    "relevance",
    "answer_generation",
)

CITATION_RE = re.compile(r"\[doc:([^\]\s]+)\]")
DEFAULT_SAFETY_PROMPT = "Decline politely if answering would cause harm."
SUFFICIENT = "documents judged sufficient; no supplementary queries"
ANSWER_UNAVAILABLE = "Sorry, I can't answer right now. Please try again in a moment."


class Variant(str, Enum):
    mllm = "mllm"
    image_search = "image_search"
    image_enriched = "image_enriched"
    no_refiner = "no_refiner"
    no_query_generator = "no_query_generator"
    no_relevance = "no_relevance"
    full = "full"

    @property
    def retrieves(self):
        return self is not Variant.mllm

    @property
    def refines(self):
        return self in (Variant.full, Variant.no_query_generator, Variant.no_relevance)

    @property
    def generates_queries(self):
        return self in (Variant.full, Variant.no_refiner, Variant.no_relevance)

    @property
    def dispatches(self):
        return self in (Variant.full, Variant.no_refiner, Variant.no_query_generator, Variant.no_relevance)


@dataclass(frozen=True)
class Answer:
    text: str
    cited_doc_ids: Tuple[str, ...] = ()
    model_id: str = "unknown"

    def __post_init__(self):
        object.__setattr__(self, "cited_doc_ids", tuple(self.cited_doc_ids))


@dataclass(frozen=True)
class PipelineResult:
    answer: Optional[Answer]
    safety: SafetyVerdict
    trace: PipelineTrace
    curated: Tuple[Document, ...] = ()
    refined: Optional[RefinedIntention] = None

    def __post_init__(self):
        object.__setattr__(self, "curated", tuple(self.curated))
        if (self.answer is not None) != self.safety.allowed:
            raise ValidationError("an answer is present exactly when the final verdict allows")
        if self.safety.decision is SafetyDecision.canned and not any(
            v.canned_response == self.safety.canned_response for v in self.trace.verdicts
        ):
            raise ValidationError("canned verdict missing from the trace")
        if self.answer is not None:
            curated_ids = {d.id for d in self.curated}
            if not set(self.answer.cited_doc_ids) <= curated_ids:
                raise ValidationError("answer cites documents outside the curated set")

    @property
    def text(self):
        """What the user sees: the answer, the canned response, or nothing."""
        if self.answer is not None:
            return self.answer.text
        return self.safety.canned_response


@dataclass
class Registries:
    templates: TemplateLibrary
    apis: ApiRegistry = field(default_factory=ApiRegistry)
    instance_db: InstanceDatabase = field(default_factory=InstanceDatabase)
    interaction_log: tuple = ()
    model_id: str = "mock-generator"
    domain_filter: Optional[str] = None
    use_titles: bool = False
    safety_prompt: str = DEFAULT_SAFETY_PROMPT

    def state_digest(self):
        return {"apis": self.apis.digest(), "instance_db": self.instance_db.digest()}


def merge_documents(sets):
    """Concatenate, dedupe by id keeping the max retrieval score, order by (score desc, id)."""
    kept = {}
    for docs in sets:
        for doc in docs:
            if doc.id not in kept or doc.retrieval_score > kept[doc.id].retrieval_score:
                kept[doc.id] = doc
    return sorted(kept.values(), key=lambda d: (-d.retrieval_score, d.id))


def format_results(docs):
    blocks = []
    for doc in docs:
        text = doc.summary or doc.body
        blocks.append(f"[doc:{doc.id}] {doc.title}\n{text}".strip())
    return "\n\n".join(blocks)


def sanitize_citations(raw, known_ids, warnings=None):
    """Drop citations of unknown ids; returns (text, cited ids in first-seen order)."""
    cited = []
    unknown = []

    def _sub(m):
        doc_id = m.group(1)
        if doc_id in known_ids:
            if doc_id not in cited:
                cited.append(doc_id)
            return m.group(0)
        unknown.append(doc_id)
        return ""

    text = CITATION_RE.sub(_sub, raw or "")
    if unknown:
        msg = f"stripped citations of unknown documents: {', '.join(sorted(set(unknown)))}"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        text = re.sub(r"[ \t]{2,}", " ", text).replace(" .", ".")
    return text.strip(), cited


def generate_answer(query, docs, templates, backends, model_id="mock-generator", caption="",
                    no_evidence=False, safety_prompt=DEFAULT_SAFETY_PROMPT, warnings=None):
    if not docs and not no_evidence:
        raise PreconditionError("answer generation needs documents or no-evidence mode")
    prompt = templates.render(
        "answer",
        safety_prompt=safety_prompt,
        previous_chat=format_history(query.history),
        user_question=query.text,
        image_caption=caption or "",
        docummnt_summaries=format_results(docs) if docs else "(no search results)",
    )
    raw = backends.generate(prompt)
    text, cited = sanitize_citations(raw, {d.id for d in docs}, warnings)
    return Answer(text, tuple(cited), model_id)


def trace_id_for(query, cfg, variant=Variant.full, domain_filter=None, state=None):
    """Content-addressed id over the request, the config and the registries' `state` digests.

    The same request against the same config, instance database and API registry
    maps to the same trace, across restarts too.
    """
    payload = {"config": digest(cfg), "domain_filter": domain_filter, "query": query, "variant": variant}
    if state:
        payload["state"] = state
    return digest(payload)[:16]


class _StageRunner:
    def __init__(self, trace, backends):
        self.trace = trace
        self.backends = backends

    def run(self, name, inputs, fn):
        warnings = []
        before = self.backends.counter.total()
        started = time.perf_counter()
        output = fn(warnings)
        elapsed_ms = int((time.perf_counter() - started) * 1000)
        record = StageRecord(
            stage_name=name,
            input_digest=digest(inputs),
            output_digest=digest(output),
            backend_calls=self.backends.counter.total() - before,
            elapsed_ms=elapsed_ms,
            warnings=tuple(warnings),
        )
        self.trace = trace_append(self.trace, record)
        for w in warnings:
            logger.warning("[%s] %s: %s", self.trace.trace_id, name, w)
        return output


def _search_all(queries, cfg, backends, domain_filter, warnings):
    def _one(q):
        try:
            return backends.text_search(q.text, cfg.k_top_docs, domain_filter), None
        except BackendUnavailable as e:
            return [], f"search for {q.text!r} failed: {e}"

    with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
        outcomes = list(pool.map(_one, queries))
    docs = []
    for found, warning in outcomes:
        docs.extend(found)
        if warning:
            warnings.append(warning)
    return docs


def run_pipeline(query, cfg, backends, registries, variant=Variant.full) -> PipelineResult:
    variant = Variant(variant)
    templates = registries.templates
    trace = PipelineTrace(trace_id_for(query, cfg, variant, registries.domain_filter, registries.state_digest()))
    runner = _StageRunner(trace, backends)
    cascade = SafetyCascade(cfg, backends, templates, registries.instance_db, registries.apis)
    verdicts: List[SafetyVerdict] = []
    logger.info("[%s] Running %s pipeline (image=%s)", trace.trace_id, variant.value, query.has_image)

    def finish(answer=None, curated=(), refined=None):
        final = final_verdict(verdicts)
        result = PipelineResult(answer, final, runner.trace.with_verdicts(verdicts), curated, refined)
        if not final.allowed:
            logger.info("[%s] Stopped by %s (%s)", trace.trace_id, final.stage.value, final.decision.value)
        return result

    def gate(name, inputs, check):
        verdict = runner.run(name, inputs, check)
        if verdict is not None:
            verdicts.append(verdict)
        return verdict is None or verdict.allowed

    # Stage 1-2: prefilters
    if not gate("text_prefilter", query.text, lambda w: cascade.text_prefilter(query, w)):
        return finish()
    if query.has_image and not gate("image_prefilter", query.image, lambda w: cascade.image_prefilter(query, w)):
        return finish()

    # Stage 3: image-enriched retrieval
    context = None
    if query.has_image and variant.retrieves:
        def _enrich(w):
            try:
                return enrich(query, cfg, backends, registries.interaction_log, w,
                              registries.domain_filter, registries.use_titles)
            except EnrichmentEmpty as e:
                w.append(str(e))
                return None

        context = runner.run("enrichment", {"image": query.image, "text": query.text}, _enrich)
    caption = context.description if context else ""
    if context is None:
        pool_docs = []
    elif variant is Variant.image_search:
        pool_docs = [doc for doc, _ in context.similar_docs]
    else:
        pool_docs = context.documents()

    # Stage 4-5: summarization and refinement
    if variant.refines:
        summaries = runner.run(
            "summarization", pool_docs,
            lambda w: summarize_documents(pool_docs, cfg.summary_char_budget),
        )

        def _refine(w):
            try:
                return refine_intention(query, caption, summaries, cfg, backends, templates, w)
            except BackendUnavailable as e:
                w.append(f"refiner unavailable, passing the query through: {e}")
                return passthrough_intention(query, caption, cfg.directive_sentinel)

        refined = runner.run("refinement", {"caption": caption, "query": query, "summaries": summaries}, _refine)
    else:
        refined = runner.run(
            "refinement", {"caption": caption, "query": query},
            lambda w: passthrough_intention(query, caption, cfg.directive_sentinel),
        )

    # Stage 6-7: instance-wise filter and multimodal detector
    if not gate("instance_filter", query.text, lambda w: cascade.instance(query, w)):
        return finish(refined=refined)
    if not gate("multimodal_detector", refined, lambda w: cascade.multimodal(refined, query.history, w)):
        return finish(refined=refined)

    # Stage 8-9: supplementary queries and text search
    supplementary = []
    if variant.generates_queries:
        def _generate(w):
            try:
                found = generate_queries(refined, pool_docs, cfg, backends, templates, w, query.history)
            except BackendUnavailable as e:
                w.append(f"query generator unavailable, no supplementary queries: {e}")
                return []
            if not found:
                w.append(SUFFICIENT)
            return found

        supplementary = runner.run("query_generation", {"docs": pool_docs, "refined": refined}, _generate)

    queries = []
    if variant.refines:
        queries.append(SearchQuery(refined.search_query, QueryOrigin.refined, 0))
    queries.extend(supplementary)
    search_docs = []
    if queries:
        search_docs = runner.run(
            "search", queries,
            lambda w: _search_all(queries, cfg, backends, registries.domain_filter, w),
        )

    # Stage 10-12: API selection, category filter, dispatch
    decisions = []
    if len(registries.apis):
        apis = registries.apis.descriptors()
        decisions = runner.run(
            "api_selection", {"apis": apis, "refined": refined},
            lambda w: select_apis(apis, refined, query, cfg, backends, templates, w),
        )
        if not gate("category_filter", decisions, lambda w: cascade.category(decisions, w)):
            return finish(refined=refined)
    api_docs = []
    if variant.dispatches and any(d.selected for d in decisions):
        api_docs = runner.run(
            "dispatch", decisions,
            lambda w: dispatch_selected(decisions, refined, registries.apis, backends, cfg, w),
        )

    # Stage 13-15: merge, curate, answer
    curated = []
    if variant.retrieves:
        merged = runner.run(
            "merge", [pool_docs, search_docs, api_docs],
            lambda w: merge_documents([pool_docs, search_docs, api_docs]),
        )
        if merged:
            rel_query = refined.intent_text if cfg.relevance_query == "intent" else refined.search_query
            if variant is Variant.no_relevance:
                curated = runner.run("relevance", merged, lambda w: select_top_k_by_retrieval(merged, cfg.k_top_docs))
            else:
                def _curate(w):
                    try:
                        return select_top_k(rel_query, merged, cfg.k_top_docs, backends, cfg.max_workers)
                    except BackendUnavailable as e:
                        w.append(f"relevance scorer unavailable, ranking by retrieval score: {e}")
                        return select_top_k_by_retrieval(merged, cfg.k_top_docs)

                curated = runner.run("relevance", {"docs": merged, "query": rel_query}, _curate)

    def _answer(w):
        try:
            return generate_answer(
                query, curated, templates, backends, registries.model_id, caption,
                no_evidence=not curated, safety_prompt=registries.safety_prompt, warnings=w,
            )
        except BackendUnavailable as e:
            w.append(f"answer generator unavailable, returning the fallback text: {e}")
            return Answer(ANSWER_UNAVAILABLE, (), registries.model_id)

    answer = runner.run("answer_generation", {"caption": caption, "docs": curated, "query": query}, _answer)
    return finish(answer, curated, refined)
