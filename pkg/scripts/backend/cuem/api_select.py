"""API selection: per-API positive-token scoring in parallel, then dispatch to connectors."""
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

from .errors import BackendUnavailable, ConfigError, ConnectorFailure, PreconditionError, UnknownApi
from .intent import format_history
from .mocks import FixtureConnector
from .models import ApiDecision, ApiDescriptor, Document
from .utils import digest

logger = logging.getLogger(__name__)

POSITIVE_TOKEN = "true"


@dataclass(frozen=True)
class ApiEntry:
    descriptor: ApiDescriptor
    endpoint: Optional[str] = None
    lexicon: Tuple[str, ...] = ()
    items: Tuple[Document, ...] = ()
    fail: bool = False


class ApiRegistry:
    """api_id -> descriptor plus how to reach its connector."""

    def __init__(self, entries=(), http_client_factory=None):
        self._entries = {e.descriptor.id: e for e in entries}
        self._http_client_factory = http_client_factory
        self._connectors = {}

    @classmethod
    def load(cls, path, http_client_factory=None):
        path = Path(path)
        try:
            if path.suffix == ".toml":
                with open(path, "rb") as f:
                    raw = tomllib.load(f).get("apis", {})
            else:
                raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read api registry {path}: {e}") from e
        return cls.from_dict(raw, http_client_factory)

    @classmethod
    def from_dict(cls, raw, http_client_factory=None):
        entries = []
        for api_id, spec in sorted(raw.items()):
            mock = spec.get("mock", {})
            try:
                descriptor = ApiDescriptor(
                    id=api_id,
                    name=spec.get("name", api_id),
                    description=spec.get("description", ""),
                    category=spec.get("category", "web"),
                    safety_relevant=bool(spec.get("safety_relevant", False)),
                    category_response=spec.get("category_response"),
                )
            except ValueError as e:
                raise ConfigError(f"api registry entry {api_id!r}: {e}") from e
            entries.append(ApiEntry(
                descriptor=descriptor,
                endpoint=spec.get("endpoint"),
                lexicon=tuple(mock.get("lexicon", ())),
                items=tuple(Document.from_dict({"source": descriptor.category.value, **d}) for d in mock.get("items", ())),
                fail=bool(mock.get("fail", False)),
            ))
        return cls(entries, http_client_factory)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, api_id):
        return api_id in self._entries

    def digest(self):
        return digest([self._entries[k] for k in sorted(self._entries)])

    def descriptors(self):
        return [self._entries[k].descriptor for k in sorted(self._entries)]

    def descriptor(self, api_id):
        return self.get(api_id).descriptor

    def get(self, api_id):
        try:
            return self._entries[api_id]
        except KeyError:
            raise UnknownApi(f"no connector registered for {api_id!r}") from None

    def lexicons(self):
        return {k: e.lexicon for k, e in self._entries.items() if e.lexicon}

    def connector(self, api_id):
        entry = self.get(api_id)
        if api_id not in self._connectors:
            if entry.endpoint and self._http_client_factory:
                from .adapters import HttpConnector

                client = self._http_client_factory(entry.endpoint)
                self._connectors[api_id] = HttpConnector(client, api_id, entry.descriptor.category)
            else:
                self._connectors[api_id] = FixtureConnector(entry.items, entry.descriptor.category, entry.fail)
        return self._connectors[api_id]


def finder_prompt(api, refined, query, templates):
    return templates.render(
        "finder",
        api_id=api.id,
        api_description=f"{api.name}: {api.description}",
        previous_chat=format_history(query.history),
        usre_query=query.text,
        refined_information=refined.intent_text,
    )


def score_api(api, refined, query, cfg, backends, templates, warnings=None):
    try:
        likelihood = backends.positive_likelihood(finder_prompt(api, refined, query, templates), POSITIVE_TOKEN)
    except BackendUnavailable as e:
        msg = f"scoring {api.id} failed, treating as not needed: {e}"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        likelihood = 0.0
    return ApiDecision.decide(api.id, likelihood, cfg.api_threshold)


def select_apis(apis, refined, query, cfg, backends, templates, warnings=None):
    """One decision per API, sorted by (likelihood desc, api_id asc) whatever the completion order."""
    if not apis:
        raise PreconditionError("select_apis needs at least one API")

    def _one(api):
        local = []
        return score_api(api, refined, query, cfg, backends, templates, local), local

    with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
        outcomes = list(pool.map(_one, apis))
    if warnings is not None:
        for decision, local in sorted(outcomes, key=lambda o: o[0].api_id):
            warnings.extend(local)
    return sorted((d for d, _ in outcomes), key=ApiDecision.sort_key)


def dispatch(decision, refined, registry, backends, k=5, warnings=None):
    if not decision.selected:
        raise PreconditionError(f"{decision.api_id} was not selected")
    entry = registry.get(decision.api_id)
    connector = registry.connector(decision.api_id)
    try:
        docs = backends.call_connector(connector, refined.search_query, k)
    except (ConnectorFailure, BackendUnavailable) as e:
        msg = f"connector {decision.api_id} failed: {e}"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return []
    return [d.with_source(entry.descriptor.category) for d in docs]


def dispatch_selected(decisions, refined, registry, backends, cfg, warnings=None):
    """Dispatch every selected decision concurrently; results keep decision order."""
    selected = [d for d in decisions if d.selected]
    if not selected:
        return []

    def _one(decision):
        local = []
        return dispatch(decision, refined, registry, backends, cfg.k_top_docs, local), local

    with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
        outcomes = list(pool.map(_one, selected))
    docs = []
    for found, local in outcomes:
        docs.extend(found)
        if warnings is not None:
            warnings.extend(local)
    return docs
