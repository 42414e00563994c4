"""Backend interfaces and the counting, deadline-enforcing facade the stages call through."""
import logging
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FuturesTimeout
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import BackendUnavailable, PreconditionError
from .models import Document, ImageRef

logger = logging.getLogger(__name__)

# Shared pool for deadline enforcement; calls never submit into it recursively.
_DEADLINE_POOL = ThreadPoolExecutor(max_workers=32, thread_name_prefix="cuem-backend")


class BackendKind(str, Enum):
    text_generator = "text_generator"
    multimodal_describer = "multimodal_describer"
    token_scorer = "token_scorer"
    embedder = "embedder"
    nli_scorer = "nli_scorer"
    text_search = "text_search"
    similar_image_search = "similar_image_search"
    text_safety_classifier = "text_safety_classifier"
    image_safety_classifier = "image_safety_classifier"
    api_connector = "api_connector"
    judge = "judge"
    relevance_scorer = "relevance_scorer"
    entity_extractor = "entity_extractor"


@dataclass(frozen=True)
class Embedding:
    values: Tuple[float, ...]
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if self.dim < 1 or self.dim != len(self.values):
            raise PreconditionError(f"embedding dim {self.dim} does not match {len(self.values)} values")

    @classmethod
    def of(cls, vector):
        arr = np.asarray(vector, dtype=float).ravel()
        return cls(tuple(arr.tolist()), int(arr.shape[0]))

    def as_array(self):
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 512
    seed: int = 0
    stop: Optional[Tuple[str, ...]] = None


class SafetyScore(NamedTuple):
    unsafe: bool
    score: float
    warning: Optional[str] = None


class TextGenerator(Protocol):
    def generate(self, prompt: str, params: DecodingParams) -> str: ...


class ImageDescriber(Protocol):
    def describe_image(self, image: ImageRef) -> str: ...


class TokenScorer(Protocol):
    def positive_likelihood(self, prompt: str, positive_token: str) -> float: ...


class Embedder(Protocol):
    def embed(self, text: str) -> Sequence[float]: ...


class NliScorer(Protocol):
    def nli_score(self, premise: str, hypothesis: str) -> float: ...


class TextSearch(Protocol):
    def search(self, query: str, k: int, domain_filter: Optional[str] = None) -> List[Document]: ...


class SimilarImageSearch(Protocol):
    def search(self, image: ImageRef, k: int) -> List[Tuple[Document, float]]: ...


class TextSafetyClassifier(Protocol):
    def classify(self, text: str) -> SafetyScore: ...


class ImageSafetyClassifier(Protocol):
    def classify(self, image: ImageRef) -> SafetyScore: ...


class ApiConnector(Protocol):
    def search(self, query: str, k: int) -> List[Document]: ...


class RelevanceScorer(Protocol):
    def score(self, query: str, doc: Document) -> float: ...


class EntityExtractor(Protocol):
    def extract(self, text: str) -> set: ...


class CallCounter:
    """Thread-safe per-kind call counts."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = Counter()

    def incr(self, kind):
        with self._lock:
            self._counts[BackendKind(kind).value] += 1

    def snapshot(self):
        with self._lock:
            return dict(self._counts)

    def total(self):
        with self._lock:
            return sum(self._counts.values())

    def __getitem__(self, kind):
        with self._lock:
            return self._counts[BackendKind(kind).value]


@dataclass
class Backends:
    generator: TextGenerator
    describer: ImageDescriber
    token_scorer: TokenScorer
    embedder: Embedder
    nli: NliScorer
    text_search_backend: TextSearch
    image_search: SimilarImageSearch
    text_safety: TextSafetyClassifier
    image_safety: ImageSafetyClassifier
    relevance: RelevanceScorer
    judge_backend: Optional[TextGenerator] = None
    entities: Optional[EntityExtractor] = None
    deadline_s: Optional[float] = None
    counter: CallCounter = field(default_factory=CallCounter)

    def fresh(self):
        """Same implementations with a new call counter, one per request."""
        return replace(self, counter=CallCounter())

    def _call(self, kind, impl, method, *args):
        """Call `impl.method(*args)`, counted, within `deadline_s`.

        A missing implementation is an unavailable backend. The deadline only
        stops the wait: a call already running keeps its pool worker until it
        returns, so hung HTTP backends are bounded by the adapter's requests
        timeout, not by the deadline.
        """
        if impl is None:
            logger.error("No %s backend configured", kind.value)
            raise BackendUnavailable(kind.value, "no implementation configured")
        fn = getattr(impl, method)
        self.counter.incr(kind)
        if self.deadline_s is None:
            return fn(*args)
        future = _DEADLINE_POOL.submit(fn, *args)
        try:
            return future.result(timeout=self.deadline_s)
        except FuturesTimeout:
            future.cancel()
            logger.error("%s exceeded the %.1fs deadline", kind.value, self.deadline_s)
            raise BackendUnavailable(kind.value, f"deadline of {self.deadline_s}s exceeded")

    def generate(self, prompt, params=None):
        if not prompt:
            raise PreconditionError("prompt must be non-empty")
        return self._call(BackendKind.text_generator, self.generator, "generate", prompt, params or DecodingParams())

    def describe_image(self, image):
        return self._call(BackendKind.multimodal_describer, self.describer, "describe_image", image)

    def positive_likelihood(self, prompt, positive_token):
        if not positive_token:
            raise PreconditionError("positive_token must be non-empty")
        value = float(self._call(
            BackendKind.token_scorer, self.token_scorer, "positive_likelihood", prompt, positive_token
        ))
        return min(1.0, max(0.0, value))

    def embed(self, text):
        if not text:
            raise PreconditionError("cannot embed empty text")
        return Embedding.of(self._call(BackendKind.embedder, self.embedder, "embed", text))

    def nli_score(self, premise, hypothesis):
        if not premise or not hypothesis:
            raise PreconditionError("premise and hypothesis must be non-empty")
        return float(self._call(BackendKind.nli_scorer, self.nli, "nli_score", premise, hypothesis))

    def text_search(self, query, k, domain_filter=None):
        if k < 1:
            raise PreconditionError("k must be >= 1")
        docs = self._call(BackendKind.text_search, self.text_search_backend, "search", query, k, domain_filter)
        return sorted(docs, key=lambda d: (-d.retrieval_score, d.id))[:k]

    def similar_image_search(self, image, k):
        if k < 1:
            raise PreconditionError("k must be >= 1")
        pairs = self._call(BackendKind.similar_image_search, self.image_search, "search", image, k)
        return sorted(pairs, key=lambda p: (-p[1], p[0].id))[:k]

    def classify_text_safety(self, text):
        return SafetyScore(*self._call(BackendKind.text_safety_classifier, self.text_safety, "classify", text or ""))

    def classify_image_safety(self, image):
        return SafetyScore(*self._call(BackendKind.image_safety_classifier, self.image_safety, "classify", image))

    def call_connector(self, connector, query, k):
        return self._call(BackendKind.api_connector, connector, "search", query, k)

    def score_relevance(self, query, doc):
        if not query:
            raise PreconditionError("relevance query must be non-empty")
        return float(self._call(BackendKind.relevance_scorer, self.relevance, "score", query, doc))

    def judge(self, prompt, params=None):
        return self._call(BackendKind.judge, self.judge_backend, "generate", prompt, params or DecodingParams())

    def extract_entities(self, text):
        return set(self._call(BackendKind.entity_extractor, self.entities, "extract", text))


def matches_domain(doc, domain_filter):
    """`domain_filter` keeps a doc whose source equals it or whose URL host contains it."""
    if not domain_filter:
        return True
    if doc.source.value == domain_filter:
        return True
    if doc.url:
        host = doc.url.split("://", 1)[-1].split("/", 1)[0].casefold()
        return domain_filter.casefold() in host
    return False
