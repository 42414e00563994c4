"""Shared value records: queries, documents, intents, decisions, verdicts, traces.

All records are frozen dataclasses validated in `__post_init__`, so an invalid
record can never be observed after construction.
"""
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Tuple

from .errors import EmptyQuery, MalformedHistory, ValidationError
from .utils import bytes_digest

DEFAULT_SENTINEL = "You must search"
DEFAULT_HISTORY_LIMIT = 20

_HEX_RE = re.compile(r"^[0-9a-f]+$")


class DocumentSource(str, Enum):
    web = "web"
    shopping = "shopping"
    map = "map"
    image_index = "image_index"
    instance_db = "instance_db"


class TagOrigin(str, Enum):
    interaction = "interaction"
    extracted = "extracted"
    annotated = "annotated"


class QueryOrigin(str, Enum):
    tag_search = "tag_search"
    refined = "refined"
    supplementary = "supplementary"


class SafetyStage(str, Enum):
    text_prefilter = "text_prefilter"
    image_prefilter = "image_prefilter"
    instance = "instance"
    multimodal = "multimodal"
    category = "category"


class SafetyDecision(str, Enum):
    allow = "allow"
    block = "block"
    canned = "canned"


def _unit(value, name):
    if value is None or math.isnan(value) or not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must be in [0, 1], got {value!r}")


@dataclass(frozen=True)
class ImageRef:
    # identity is the content digest; the rest is metadata
    id: str = field(compare=False)
    content_digest: str
    media_type: str = field(default="image/jpeg", compare=False)
    source_uri: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.id:
            raise ValidationError("image id must be non-empty")
        if not self.content_digest or not _HEX_RE.match(self.content_digest):
            raise ValidationError(f"content_digest must be lowercase hex, got {self.content_digest!r}")

    @classmethod
    def from_bytes(cls, image_id, data, media_type="image/jpeg", source_uri=None):
        return cls(image_id, bytes_digest(data), media_type, source_uri)


@dataclass(frozen=True)
class MultimodalQuery:
    text: str
    image: Optional[ImageRef] = None
    history: Tuple[Tuple[str, str], ...] = ()
    locale: str = "en"

    def __post_init__(self):
        text = (self.text or "").strip()
        object.__setattr__(self, "text", text)
        if not text and self.image is None:
            raise EmptyQuery("query needs non-empty text or an image")
        history = tuple((str(role), str(utt)) for role, utt in self.history)
        expected = None
        for role, _ in history:
            if role not in ("user", "assistant"):
                raise MalformedHistory(f"unknown role {role!r}")
            if expected is not None and role != expected:
                raise MalformedHistory("history roles must alternate user/assistant")
            expected = "assistant" if role == "user" else "user"
        object.__setattr__(self, "history", history)

    @property
    def has_image(self):
        return self.image is not None


def new_query(text, image=None, history=(), locale="en", history_limit=DEFAULT_HISTORY_LIMIT):
    """Validated query; history beyond `history_limit` turns drops the oldest."""
    query = MultimodalQuery(text or "", image, tuple(history), locale)
    if history_limit is not None and len(query.history) > history_limit:
        query = replace(query, history=query.history[-history_limit:] if history_limit else ())
    return query


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    body: str
    source: DocumentSource
    summary: Optional[str] = None
    url: Optional[str] = None
    retrieval_score: float = 0.0
    relevance_score: Optional[float] = None
    tags: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise ValidationError("document id must be non-empty")
        object.__setattr__(self, "source", DocumentSource(self.source))
        object.__setattr__(self, "tags", tuple(self.tags))
        if self.retrieval_score is None or self.retrieval_score < 0:
            raise ValidationError(f"retrieval_score must be >= 0, got {self.retrieval_score!r}")
        if self.relevance_score is not None:
            _unit(self.relevance_score, "relevance_score")

    @property
    def text(self):
        return f"{self.title} {self.body}".strip()

    def with_relevance(self, score):
        return replace(self, relevance_score=float(score))

    def with_source(self, source):
        return replace(self, source=DocumentSource(source))

    def with_retrieval_score(self, score):
        return replace(self, retrieval_score=float(score))

    @classmethod
    def from_dict(cls, data):
        return cls(
            id=data["id"],
            title=data.get("title", ""),
            body=data.get("body", ""),
            source=data.get("source", "web"),
            summary=data.get("summary"),
            url=data.get("url"),
            retrieval_score=float(data.get("retrieval_score", 0.0)),
            relevance_score=data.get("relevance_score"),
            tags=tuple(data.get("tags", ())),
        )


@dataclass(frozen=True)
class ImageTag:
    tag: str
    weight: float
    origin: TagOrigin

    def __post_init__(self):
        object.__setattr__(self, "origin", TagOrigin(self.origin))
        if not self.tag or self.tag != self.tag.casefold():
            raise ValidationError(f"tag must be non-empty and case-folded, got {self.tag!r}")
        if self.weight < 0:
            raise ValidationError("tag weight must be >= 0")


def tag_sort_key(tag):
    return (-tag.weight, tag.tag)


@dataclass(frozen=True)
class ImageContext:
    description: str
    tags: Tuple[ImageTag, ...] = ()
    similar_docs: Tuple[Tuple[Document, float], ...] = ()
    tag_docs: Tuple[Document, ...] = ()

    def __post_init__(self):
        tags = tuple(self.tags)
        if len({t.tag for t in tags}) != len(tags):
            raise ValidationError("tags must be deduplicated")
        if list(tags) != sorted(tags, key=tag_sort_key):
            raise ValidationError("tags must be sorted by weight desc, tag asc")
        similar = tuple((doc, float(sim)) for doc, sim in self.similar_docs)
        for _, sim in similar:
            _unit(sim, "similarity")
        if any(a[1] < b[1] for a, b in zip(similar, similar[1:])):
            raise ValidationError("similar_docs similarities must be non-increasing")
        object.__setattr__(self, "tags", tags)
        object.__setattr__(self, "similar_docs", similar)
        object.__setattr__(self, "tag_docs", tuple(self.tag_docs))

    def documents(self):
        """Similar-image documents followed by tag-search documents."""
        return [doc for doc, _ in self.similar_docs] + list(self.tag_docs)


@dataclass(frozen=True)
class RefinedIntention:
    intent_text: str
    search_query: str
    used_doc_ids: Tuple[str, ...] = ()
    used_caption: bool = False
    sentinel: str = DEFAULT_SENTINEL

    def __post_init__(self):
        object.__setattr__(self, "used_doc_ids", tuple(self.used_doc_ids))
        if not self.search_query or not self.search_query.strip():
            raise ValidationError("search_query must be non-empty")
        if self.sentinel.casefold() not in self.intent_text.casefold():
            raise ValidationError(f"intent_text must carry the directive {self.sentinel!r}")


@dataclass(frozen=True)
class SearchQuery:
    text: str
    origin: QueryOrigin
    rank: int = 0

    def __post_init__(self):
        object.__setattr__(self, "origin", QueryOrigin(self.origin))
        if not self.text or not self.text.strip():
            raise ValidationError("search query text must be non-empty")
        if self.rank < 0:
            raise ValidationError("rank must be >= 0")


@dataclass(frozen=True)
class ApiDescriptor:
    id: str
    name: str
    description: str
    category: DocumentSource = DocumentSource.web
    safety_relevant: bool = False
    category_response: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "category", DocumentSource(self.category))
        if not self.id:
            raise ValidationError("api id must be non-empty")
        if self.safety_relevant and not self.category_response:
            raise ValidationError(f"safety-relevant api {self.id!r} needs a category_response")


@dataclass(frozen=True)
class ApiDecision:
    api_id: str
    positive_likelihood: float
    selected: bool

    def __post_init__(self):
        _unit(self.positive_likelihood, "positive_likelihood")

    @classmethod
    def decide(cls, api_id, likelihood, threshold):
        _unit(threshold, "api_threshold")
        likelihood = float(likelihood)
        return cls(api_id, likelihood, likelihood >= threshold)

    def sort_key(self):
        return (-self.positive_likelihood, self.api_id)


@dataclass(frozen=True)
class SafetyVerdict:
    stage: SafetyStage
    decision: SafetyDecision
    canned_response: Optional[str] = None
    score: Optional[float] = None
    warning: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "stage", SafetyStage(self.stage))
        object.__setattr__(self, "decision", SafetyDecision(self.decision))
        if self.decision is SafetyDecision.canned and not self.canned_response:
            raise ValidationError("canned verdict needs a canned_response")
        if self.score is not None:
            _unit(self.score, "verdict score")

    @property
    def allowed(self):
        return self.decision is SafetyDecision.allow


@dataclass(frozen=True)
class PipelineConfig:
    k_top_docs: int = 5
    max_supplementary_queries: int = 3
    api_threshold: float = 0.5
    instance_similarity_threshold: float = 0.92
    annotated_tag_similarity_threshold: float = 0.9
    summary_char_budget: int = 1200
    directive_sentinel: str = DEFAULT_SENTINEL
    history_limit: int = DEFAULT_HISTORY_LIMIT
    tag_search_count: int = 3
    keyword_count: int = 5
    max_workers: int = 4
    backend_deadline_s: Optional[float] = 10.0
    relevance_query: str = "intent"

    def __post_init__(self):
        for name in ("api_threshold", "instance_similarity_threshold", "annotated_tag_similarity_threshold"):
            _unit(getattr(self, name), name)
        if self.k_top_docs < 1:
            raise ValidationError("k_top_docs must be >= 1")
        if self.max_supplementary_queries < 0:
            raise ValidationError("max_supplementary_queries must be >= 0")
        if self.summary_char_budget < 1:
            raise ValidationError("summary_char_budget must be >= 1")
        if not self.directive_sentinel.strip():
            raise ValidationError("directive_sentinel must be non-empty")
        if self.history_limit < 0 or self.tag_search_count < 0 or self.keyword_count < 1 or self.max_workers < 1:
            raise ValidationError("history_limit, tag_search_count, keyword_count, max_workers out of range")
        if self.relevance_query not in ("intent", "search_query"):
            raise ValidationError("relevance_query must be 'intent' or 'search_query'")


@dataclass(frozen=True)
class StageRecord:
    stage_name: str
    input_digest: str
    output_digest: str
    backend_calls: int = 0
    elapsed_ms: int = 0
    warnings: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.stage_name:
            raise ValidationError("stage_name must be non-empty")
        object.__setattr__(self, "warnings", tuple(self.warnings))


@dataclass(frozen=True)
class PipelineTrace:
    trace_id: str
    stages: Tuple[StageRecord, ...] = ()
    verdicts: Tuple[SafetyVerdict, ...] = ()

    @property
    def stage_names(self):
        return [s.stage_name for s in self.stages]

    @property
    def backend_calls(self):
        return sum(s.backend_calls for s in self.stages)

    def with_verdicts(self, verdicts):
        return replace(self, verdicts=tuple(verdicts))


def trace_append(trace, record):
    """New trace with `record` appended; earlier records are shared, never copied."""
    if not isinstance(record, StageRecord):
        raise ValidationError("trace records must be StageRecord instances")
    return replace(trace, stages=trace.stages + (record,))


def trace_from_dict(data):
    stages = tuple(StageRecord(**{**s, "warnings": tuple(s.get("warnings", ()))}) for s in data.get("stages", ()))
    verdicts = tuple(SafetyVerdict(**v) for v in data.get("verdicts", ()))
    return PipelineTrace(data["trace_id"], stages, verdicts)
