"""Wires settings into backends, registries and stores; shared by the CLI, service and console."""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List

from .adapters import HttpBackendClient, build_http_backends
from .api_select import ApiRegistry
from .backends import Backends
from .enrichment import load_interaction_log
from .errors import ConfigError, UnknownImage
from .mocks import (
    BlocklistTextSafety,
    Bm25Index,
    CapitalizedSpanExtractor,
    DigestImageSafety,
    JaccardNli,
    LengthJudge,
    LexicalRelevance,
    MockDescriber,
    MockEmbedder,
    MockGenerator,
    MockImageSearch,
    MockTokenScorer,
)
from .models import Document, ImageRef, new_query
from .pipeline import Registries, Variant, run_pipeline
from .safety import make_entry
from .templates import TemplateLibrary

logger = logging.getLogger(__name__)


def _read_json(path, default=None):
    path = Path(path)
    if not path.exists():
        if default is not None:
            return default
        raise ConfigError(f"fixture file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e


@dataclass
class ImageStore:
    """Registered image assets by id; requests refer to images by id, never inline."""

    images: Dict[str, ImageRef] = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        raw = _read_json(path)
        base = Path(path).parent
        images = {}
        for spec in raw.get("images", []):
            images[spec["id"]] = image_from_spec(spec, base)
        return cls(images)

    def resolve(self, image_id):
        try:
            return self.images[image_id]
        except KeyError:
            raise UnknownImage(f"image {image_id!r} is not registered") from None

    def ids(self):
        return sorted(self.images)


def image_from_spec(spec, base_dir):
    if "path" in spec:
        data = (Path(base_dir) / spec["path"]).read_bytes()
    else:
        data = spec.get("content", spec["id"]).encode("utf-8")
    return ImageRef.from_bytes(spec["id"], data, spec.get("media_type", "image/jpeg"), spec.get("path"))


def load_fixture_backends(fixtures_dir, registry=None, deadline_s=None):
    """Mock backends built from the JSON fixture tables in `fixtures_dir`."""
    fixtures_dir = Path(fixtures_dir)
    corpus = [Document.from_dict(d) for d in _read_json(fixtures_dir / "corpus.json", [])]
    images_raw = _read_json(fixtures_dir / "images.json", {"images": []})
    safety_raw = _read_json(fixtures_dir / "safety.json", {})

    captions, neighbors, flagged, known = {}, {}, set(), set()
    for spec in images_raw.get("images", []):
        ref = image_from_spec(spec, fixtures_dir)
        known.add(ref.content_digest)
        if spec.get("caption"):
            captions[ref.content_digest] = spec["caption"]
        if "neighbors" in spec:
            neighbors[ref.content_digest] = [
                (Document.from_dict({"source": "image_index", **n}), float(n["similarity"]))
                for n in spec["neighbors"]
            ]
        if spec.get("unsafe"):
            flagged.add(ref.content_digest)

    return Backends(
        generator=MockGenerator(_read_json(fixtures_dir / "generator.json", {})),
        describer=MockDescriber(captions),
        token_scorer=MockTokenScorer(registry.lexicons() if registry is not None else {}),
        embedder=MockEmbedder(dim=64),
        nli=JaccardNli(),
        text_search_backend=Bm25Index(corpus),
        image_search=MockImageSearch(neighbors),
        text_safety=BlocklistTextSafety(safety_raw.get("blocklist", [])),
        image_safety=DigestImageSafety(flagged, known),
        relevance=LexicalRelevance(),
        judge_backend=LengthJudge(),
        entities=CapitalizedSpanExtractor(),
        deadline_s=deadline_s,
    )


@dataclass
class Runtime:
    settings: object
    backends: Backends
    registries: Registries
    images: ImageStore
    traces: object
    instances: object
    http_clients: List[HttpBackendClient] = field(default_factory=list)

    @property
    def cfg(self):
        return self.settings.pipeline

    def not_ready(self):
        """Base URLs of HTTP backends failing their health probe."""
        return [c.base_url for c in self.http_clients if not c.is_healthy()]

    def make_query(self, text, image_id=None, history=(), locale="en"):
        image = self.images.resolve(image_id) if image_id else None
        return new_query(text, image, history, locale, self.cfg.history_limit)

    def run(self, query, variant=Variant.full, persist=True):
        registries = replace(self.registries, instance_db=self.instances.snapshot())
        result = run_pipeline(query, self.cfg, self.backends.fresh(), registries, variant)
        if persist:
            self.traces.save(result, query)
        return result

    def ask(self, text, image_id=None, history=(), locale="en", variant=Variant.full):
        query = self.make_query(text, image_id, history, locale)
        return query, self.run(query, variant)

    def add_instance(self, entry_id, query_text, canned_response):
        entry = make_entry(entry_id, query_text, canned_response, self.backends)
        self.instances.add(entry)
        return entry


def build_runtime(settings):
    # imported here so the engine package stays importable without the app layer
    from scripts.backend.db import InstanceStore, TraceStore

    http_clients = []
    factory = None
    if settings.backend_mode == "http":
        def factory(url):
            return HttpBackendClient(url, settings.backend_timeout_s)

    registry = ApiRegistry.load(settings.api_registry, factory) if settings.api_registry else ApiRegistry()
    if settings.backend_mode == "http":
        backends, http_clients = build_http_backends(
            settings.endpoints, settings.backend_timeout_s, settings.pipeline.backend_deadline_s
        )
    else:
        backends = load_fixture_backends(settings.fixtures_dir, registry, settings.pipeline.backend_deadline_s)

    images = ImageStore.load(settings.image_store) if settings.image_store else ImageStore()
    interaction_log = ()
    if settings.interaction_log and Path(settings.interaction_log).exists():
        interaction_log = tuple(load_interaction_log(settings.interaction_log))

    instances = InstanceStore(settings.instance_db)
    if not len(instances.snapshot()) and settings.backend_mode == "mock":
        seeds = _read_json(Path(settings.fixtures_dir) / "safety.json", {}).get("instances", [])
        for seed in seeds:
            instances.add(make_entry(seed["id"], seed["query_text"], seed["canned_response"], backends))
        if seeds:
            logger.info("Seeded instance db %s with %d fixture entries", settings.instance_db, len(seeds))

    registries = Registries(
        templates=TemplateLibrary(settings.templates_dir),
        apis=registry,
        instance_db=instances.snapshot(),
        interaction_log=interaction_log,
        model_id="mock-generator" if settings.backend_mode == "mock" else settings.endpoints.get(
            "text_generator", settings.endpoints.get("default", "http")),
        domain_filter=settings.domain_filter,
    )
    return Runtime(settings, backends, registries, images, TraceStore(settings.trace_store), instances, http_clients)
