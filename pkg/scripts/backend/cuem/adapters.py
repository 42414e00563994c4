"""HTTP adapters for real backends: JSON in, JSON out, one endpoint per kind."""
import logging

import requests

from .backends import Backends, BackendKind, SafetyScore
from .errors import BackendUnavailable, ConnectorFailure, UnknownImage
from .models import Document
from .utils import to_jsonable

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 10.0


class HttpBackendClient:
    """POSTs `/v1/<kind>`; transport errors and non-2xx answers become BackendUnavailable."""

    def __init__(self, base_url, timeout_s=DEFAULT_TIMEOUT_S, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def post(self, kind, payload):
        kind = BackendKind(kind).value
        url = f"{self.base_url}/v1/{kind}"
        try:
            resp = self.session.post(url, json=to_jsonable(payload), timeout=self.timeout_s)
        except requests.RequestException as e:
            logger.error("%s request to %s failed: %s", kind, url, e)
            raise BackendUnavailable(kind, str(e)) from e
        if resp.status_code == 404 and "image" in payload:
            raise UnknownImage(f"{kind} does not know image {payload['image'].id}")
        if not resp.ok:
            logger.error("%s answered %s: %s", url, resp.status_code, resp.text[:200])
            raise BackendUnavailable(kind, f"HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as e:
            raise BackendUnavailable(kind, "response is not JSON") from e

    def is_healthy(self):
        try:
            return self.session.get(f"{self.base_url}/health", timeout=self.timeout_s).ok
        except requests.RequestException:
            return False


class HttpGenerator:
    def __init__(self, client, kind=BackendKind.text_generator):
        self.client = client
        self.kind = kind

    def generate(self, prompt, params=None):
        return self.client.post(self.kind, {"prompt": prompt, "params": params})["text"]


class HttpDescriber:
    def __init__(self, client):
        self.client = client

    def describe_image(self, image):
        return self.client.post(BackendKind.multimodal_describer, {"image": image})["description"]


class HttpTokenScorer:
    def __init__(self, client):
        self.client = client

    def positive_likelihood(self, prompt, positive_token):
        body = {"prompt": prompt, "positive_token": positive_token}
        return float(self.client.post(BackendKind.token_scorer, body)["likelihood"])


class HttpEmbedder:
    def __init__(self, client):
        self.client = client

    def embed(self, text):
        return self.client.post(BackendKind.embedder, {"text": text})["values"]


class HttpNli:
    def __init__(self, client):
        self.client = client

    def nli_score(self, premise, hypothesis):
        body = {"premise": premise, "hypothesis": hypothesis}
        return float(self.client.post(BackendKind.nli_scorer, body)["score"])


class HttpTextSearch:
    def __init__(self, client):
        self.client = client

    def search(self, query, k, domain_filter=None):
        body = {"query": query, "k": k, "domain_filter": domain_filter}
        return [Document.from_dict(d) for d in self.client.post(BackendKind.text_search, body)["documents"]]


class HttpImageSearch:
    def __init__(self, client):
        self.client = client

    def search(self, image, k):
        found = self.client.post(BackendKind.similar_image_search, {"image": image, "k": k})["results"]
        return [(Document.from_dict(r["document"]), float(r["similarity"])) for r in found]


class HttpSafetyClassifier:
    def __init__(self, client, kind):
        self.client = client
        self.kind = kind

    def classify(self, item):
        key = "image" if self.kind is BackendKind.image_safety_classifier else "text"
        out = self.client.post(self.kind, {key: item})
        return SafetyScore(bool(out["unsafe"]), float(out["score"]), out.get("warning"))


class HttpRelevance:
    def __init__(self, client):
        self.client = client

    def score(self, query, doc):
        return float(self.client.post(BackendKind.relevance_scorer, {"query": query, "document": doc})["score"])


class HttpEntityExtractor:
    def __init__(self, client):
        self.client = client

    def extract(self, text):
        return set(self.client.post(BackendKind.entity_extractor, {"text": text})["entities"])


class HttpConnector:
    def __init__(self, client, api_id, category):
        self.client = client
        self.api_id = api_id
        self.category = category

    def search(self, query, k):
        try:
            out = self.client.post(BackendKind.api_connector, {"api_id": self.api_id, "query": query, "k": k})
        except BackendUnavailable as e:
            raise ConnectorFailure(f"{self.api_id}: {e}") from e
        return [Document.from_dict(d).with_source(self.category) for d in out["documents"]]


def build_http_backends(endpoints, timeout_s=DEFAULT_TIMEOUT_S, deadline_s=None):
    """Backends facade over `endpoints` (kind -> base URL); a `default` entry fills gaps."""
    clients = {}

    def client(kind):
        url = endpoints.get(kind.value) or endpoints.get("default")
        if not url:
            return None
        if url not in clients:
            clients[url] = HttpBackendClient(url, timeout_s)
        return clients[url]

    def opt(kind, factory):
        c = client(kind)
        return factory(c) if c else None

    backends = Backends(
        generator=opt(BackendKind.text_generator, HttpGenerator),
        describer=opt(BackendKind.multimodal_describer, HttpDescriber),
        token_scorer=opt(BackendKind.token_scorer, HttpTokenScorer),
        embedder=opt(BackendKind.embedder, HttpEmbedder),
        nli=opt(BackendKind.nli_scorer, HttpNli),
        text_search_backend=opt(BackendKind.text_search, HttpTextSearch),
        image_search=opt(BackendKind.similar_image_search, HttpImageSearch),
        text_safety=opt(BackendKind.text_safety_classifier,
                        lambda c: HttpSafetyClassifier(c, BackendKind.text_safety_classifier)),
        image_safety=opt(BackendKind.image_safety_classifier,
                         lambda c: HttpSafetyClassifier(c, BackendKind.image_safety_classifier)),
        relevance=opt(BackendKind.relevance_scorer, HttpRelevance),
        judge_backend=opt(BackendKind.judge, lambda c: HttpGenerator(c, BackendKind.judge)),
        entities=opt(BackendKind.entity_extractor, HttpEntityExtractor),
        deadline_s=deadline_s,
    )
    return backends, sorted(set(clients.values()), key=lambda c: c.base_url)
