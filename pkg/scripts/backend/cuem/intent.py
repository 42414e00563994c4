"""Intention refinement and supplementary query generation, with strict output parsing."""
import logging
import re
import string

from .errors import MissingSentinel, PreconditionError
from .models import QueryOrigin, RefinedIntention, SearchQuery
from .utils import truncate_words

logger = logging.getLogger(__name__)

_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")
_CLAUSE_STRIP = string.whitespace + string.punctuation + "~"
QUERY_PREFIX = "QUERY:"


def summarize_documents(docs, budget):
    """(doc_id, summary) pairs; each doc gets an equal share of `budget` chars."""
    if budget < 1:
        raise PreconditionError("summary budget must be >= 1")
    if not docs:
        return []
    share = budget // len(docs)
    out = []
    for doc in docs:
        if doc.summary and len(doc.summary) <= share:
            out.append((doc.id, doc.summary))
            continue
        source = (doc.summary or doc.body or doc.title).strip()
        summary = ""
        for sentence in _SENTENCE_RE.split(source):
            candidate = f"{summary} {sentence}".strip()
            if len(candidate) > share:
                break
            summary = candidate
        out.append((doc.id, summary or truncate_words(source, share)))
    return out


def format_summaries(summaries):
    return "\n".join(f"[doc:{doc_id}] {text}" for doc_id, text in summaries)


def format_history(history):
    return "\n".join(f"{'User' if role == 'user' else 'Assistant'}: {utt}" for role, utt in history)


def parse_refinement(raw, sentinel):
    """The clause after the LAST sentinel becomes the search query."""
    matches = list(re.finditer(re.escape(sentinel), raw or "", re.IGNORECASE))
    if not matches:
        raise MissingSentinel(f"output lacks {sentinel!r}")
    clause = raw[matches[-1].end():].strip(_CLAUSE_STRIP)
    if not clause:
        raise MissingSentinel(f"nothing follows the last {sentinel!r}")
    return RefinedIntention(intent_text=raw.strip(), search_query=clause, sentinel=sentinel)


def passthrough_intention(query, caption, sentinel):
    text = query.text or caption or "image"
    return RefinedIntention(
        intent_text=f"{text} {sentinel}",
        search_query=text,
        used_caption=bool(caption) and not query.text,
        sentinel=sentinel,
    )


def refine_intention(query, caption, summaries, cfg, backends, templates, warnings=None):
    sentinel = cfg.directive_sentinel
    if not caption and not summaries:
        logger.info("Nothing to refine against; passing the query through")
        return passthrough_intention(query, caption, sentinel)

    values = dict(
        sentinel=sentinel,
        few_shots=templates.few_shots("refiner"),
        previous_chat=format_history(query.history),
        user_question=query.text,
        image_caption=caption or "",
        docummnt_summaries=format_summaries(summaries),
        repair="",
    )
    used_ids = tuple(doc_id for doc_id, _ in summaries)
    raw = backends.generate(templates.render("refiner", **values))
    try:
        parsed = parse_refinement(raw, sentinel)
    except MissingSentinel:
        values["repair"] = (
            f"Your previous reply did not end with '{sentinel} <search query> ~'. "
            f"Rewrite it so that it does.\n"
        )
        raw = backends.generate(templates.render("refiner", **values))
        try:
            parsed = parse_refinement(raw, sentinel)
        except MissingSentinel as e:
            msg = f"refiner output unparseable after retry ({e}); using the user text"
            logger.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            fallback = passthrough_intention(query, caption, sentinel)
            return RefinedIntention(
                fallback.intent_text, fallback.search_query, used_ids, bool(caption), sentinel
            )
    return RefinedIntention(parsed.intent_text, parsed.search_query, used_ids, bool(caption), sentinel)


def parse_queries(raw):
    seen = set()
    queries = []
    for line in (raw or "").splitlines():
        line = line.strip()
        if not line.upper().startswith(QUERY_PREFIX):
            continue
        text = line[len(QUERY_PREFIX):].strip()
        if text and text.casefold() not in seen:
            seen.add(text.casefold())
            queries.append(text)
    return queries


def generate_queries(refined, docs, cfg, backends, templates, warnings=None, history=()):
    """Supplementary queries; an empty list means the documents were judged sufficient."""
    limit = cfg.max_supplementary_queries
    if limit == 0:
        return []
    prompt = templates.render(
        "query_generator",
        max_queries=limit,
        previous_chat=format_history(history),
        refined_information=refined.intent_text,
        docummnt_summaries=format_summaries(summarize_documents(docs, cfg.summary_char_budget)),
    )
    texts = parse_queries(backends.generate(prompt))
    if len(texts) > limit:
        msg = f"query generator produced {len(texts)} queries; keeping the first {limit}"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        texts = texts[:limit]
    return [SearchQuery(text, QueryOrigin.supplementary, rank) for rank, text in enumerate(texts)]
