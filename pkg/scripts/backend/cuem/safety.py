"""Layered safety cascade.

Stages run in a fixed order and stop at the first block or canned verdict:
text prefilter, image prefilter, instance-wise filter, multimodal detector,
category-wise filter. Prefilters fail open, the detector fails closed.
"""
import logging
from collections.abc import Mapping
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .backends import Embedding
from .errors import BackendUnavailable, PreconditionError, UnknownImage, ValidationError
from .intent import format_history
from .models import SafetyDecision, SafetyStage, SafetyVerdict
from .utils import digest

logger = logging.getLogger(__name__)

CASCADE_ORDER = (
    SafetyStage.text_prefilter,
    SafetyStage.image_prefilter,
    SafetyStage.instance,
    SafetyStage.multimodal,
    SafetyStage.category,
)


@dataclass(frozen=True)
class InstanceFilterEntry:
    id: str
    query_text: str
    embedding: Embedding
    canned_response: str

    def __post_init__(self):
        if not self.id:
            raise ValidationError("instance entry id must be non-empty")
        if not self.canned_response or not self.canned_response.strip():
            raise ValidationError("instance entry needs a canned_response")

    def to_record(self):
        return {
            "canned_response": self.canned_response,
            "embedding": list(self.embedding.values),
            "id": self.id,
            "query_text": self.query_text,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(rec["id"], rec["query_text"], Embedding.of(rec["embedding"]), rec["canned_response"])


def make_entry(entry_id, query_text, canned_response, backends):
    """Entry whose embedding is computed by the configured embedder."""
    return InstanceFilterEntry(entry_id, query_text, backends.embed(query_text), canned_response)


class InstanceDatabase:
    """Immutable entry set scanned by cosine similarity against a row-normalized matrix."""

    def __init__(self, entries=()):
        by_id = {}
        for e in entries:
            by_id[e.id] = e
        self.entries: Tuple[InstanceFilterEntry, ...] = tuple(by_id[k] for k in sorted(by_id))
        self._digest = None
        if self.entries:
            dims = {e.embedding.dim for e in self.entries}
            if len(dims) != 1:
                raise ValidationError(f"instance entries mix embedding dims {sorted(dims)}")
            matrix = np.vstack([e.embedding.as_array() for e in self.entries])
            norms = np.linalg.norm(matrix, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            self._matrix = matrix / norms
        else:
            self._matrix = np.zeros((0, 0))

    def __len__(self):
        return len(self.entries)

    def add(self, entry):
        return InstanceDatabase(self.entries + (entry,))

    def similarities(self, embedding):
        v = embedding.as_array()
        n = np.linalg.norm(v)
        if n == 0 or not self.entries:
            return np.zeros(len(self.entries))
        # elementwise product then row sums: identical rows give identical scores
        sims = (self._matrix * (v / n)).sum(axis=1)
        sims[np.isclose(sims, 1.0, rtol=0.0, atol=1e-12)] = 1.0
        return np.clip(sims, -1.0, 1.0)

    def digest(self):
        if self._digest is None:
            self._digest = digest([e.to_record() for e in self.entries])
        return self._digest

    def nearest(self, embedding):
        """(entry, similarity) of the best match; ties go to the smallest id."""
        if not self.entries:
            return None
        sims = self.similarities(embedding)
        best = int(np.flatnonzero(sims == sims.max())[0])
        return self.entries[best], float(sims[best])


def _note(warnings, msg):
    logger.warning(msg)
    if warnings is not None:
        warnings.append(msg)


def instance_filter(query, db, threshold, backends):
    """Canned verdict when the query text is close enough to a known unsafe query, else None."""
    if not 0.0 <= threshold <= 1.0:
        raise PreconditionError("instance threshold must be in [0, 1]")
    if not len(db) or not query.text:
        return None
    entry, sim = db.nearest(backends.embed(query.text))
    if sim >= threshold:
        return SafetyVerdict(SafetyStage.instance, SafetyDecision.canned, entry.canned_response, max(0.0, sim))
    return None


def parse_detector_output(raw):
    token = (raw or "").strip().rstrip("}").strip().strip('"').casefold()
    if token in ("true", "false"):
        return token == "true"
    return None


def multimodal_detect(refined, history, backends, templates, warnings=None):
    values = dict(
        few_shots=templates.few_shots("detector"),
        previous_chat=format_history(history),
        refined_information=refined.intent_text,
        repair="",
    )
    try:
        safe = parse_detector_output(backends.generate(templates.render("detector", **values)))
        if safe is None:
            values["repair"] = "Answer with true or false only.\n"
            safe = parse_detector_output(backends.generate(templates.render("detector", **values)))
    except BackendUnavailable as e:
        _note(warnings, f"multimodal detector unavailable, blocking: {e}")
        return SafetyVerdict(SafetyStage.multimodal, SafetyDecision.block, warning=str(e))
    if safe is None:
        msg = "multimodal detector output unparseable after retry, blocking"
        _note(warnings, msg)
        return SafetyVerdict(SafetyStage.multimodal, SafetyDecision.block, warning=msg)
    return SafetyVerdict(SafetyStage.multimodal, SafetyDecision.allow if safe else SafetyDecision.block)


def category_filter(decisions, apis, policy=None):
    """Canned category response when a selected API is safety relevant.

    `apis` is a registry, a mapping api_id -> ApiDescriptor or a descriptor list.
    The highest-likelihood flagged API wins, ties by api_id.
    """
    if hasattr(apis, "descriptor"):
        lookup = apis.descriptor
    else:
        table = dict(apis) if isinstance(apis, Mapping) else {a.id: a for a in apis}
        lookup = table.__getitem__
    flagged = []
    for d in decisions:
        if not d.selected:
            continue
        api = lookup(d.api_id)
        if api.safety_relevant:
            flagged.append((d, api))
    if not flagged:
        return None
    decision, api = min(flagged, key=lambda pair: pair[0].sort_key())
    response = (policy or {}).get(api.id, api.category_response)
    return SafetyVerdict(SafetyStage.category, SafetyDecision.canned, response, decision.positive_likelihood)


class SafetyCascade:
    """The cascade's stages, callable one at a time so the orchestrator can interleave them with retrieval."""

    def __init__(self, cfg, backends, templates, db=None, registry=None, policy=None):
        self.cfg = cfg
        self.backends = backends
        self.templates = templates
        self.db = db if db is not None else InstanceDatabase()
        self.registry = registry
        self.policy = policy

    def text_prefilter(self, query, warnings=None):
        try:
            score = self.backends.classify_text_safety(query.text)
        except BackendUnavailable as e:
            _note(warnings, f"text prefilter unavailable, allowing: {e}")
            return SafetyVerdict(SafetyStage.text_prefilter, SafetyDecision.allow, warning=str(e))
        decision = SafetyDecision.block if score.unsafe else SafetyDecision.allow
        return SafetyVerdict(SafetyStage.text_prefilter, decision, score=_unit_score(score.score))

    def image_prefilter(self, query, warnings=None):
        if not query.has_image:
            return None
        try:
            score = self.backends.classify_image_safety(query.image)
        except (BackendUnavailable, UnknownImage) as e:
            _note(warnings, f"image prefilter unavailable, allowing: {e}")
            return SafetyVerdict(SafetyStage.image_prefilter, SafetyDecision.allow, warning=str(e))
        if score.warning:
            _note(warnings, score.warning)
        decision = SafetyDecision.block if score.unsafe else SafetyDecision.allow
        return SafetyVerdict(SafetyStage.image_prefilter, decision, score=_unit_score(score.score), warning=score.warning)

    def instance(self, query, warnings=None):
        try:
            verdict = instance_filter(query, self.db, self.cfg.instance_similarity_threshold, self.backends)
        except BackendUnavailable as e:
            _note(warnings, f"instance filter unavailable, blocking: {e}")
            return SafetyVerdict(SafetyStage.instance, SafetyDecision.block, warning=str(e))
        return verdict or SafetyVerdict(SafetyStage.instance, SafetyDecision.allow)

    def multimodal(self, refined, history=(), warnings=None):
        return multimodal_detect(refined, history, self.backends, self.templates, warnings)

    def category(self, decisions, warnings=None):
        if not decisions:
            return None
        verdict = category_filter(decisions, self.registry, self.policy)
        return verdict or SafetyVerdict(SafetyStage.category, SafetyDecision.allow)

    def prefilter(self, query, warnings=None):
        return _run_stages([
            lambda: self.text_prefilter(query, warnings),
            lambda: self.image_prefilter(query, warnings),
        ])

    def check_intent(self, query, refined, warnings=None):
        return _run_stages([
            lambda: self.instance(query, warnings),
            lambda: self.multimodal(refined, query.history, warnings),
        ])

    def check_categories(self, decisions, warnings=None):
        return _run_stages([lambda: self.category(decisions, warnings)])


def _unit_score(value):
    return None if value is None else min(1.0, max(0.0, float(value)))


def _run_stages(stages) -> List[SafetyVerdict]:
    verdicts = []
    for stage in stages:
        verdict = stage()
        if verdict is None:
            continue
        verdicts.append(verdict)
        if not verdict.allowed:
            break
    return verdicts


def final_verdict(verdicts) -> SafetyVerdict:
    for v in verdicts:
        if not v.allowed:
            return v
    stage = verdicts[-1].stage if verdicts else SafetyStage.text_prefilter
    return SafetyVerdict(stage, SafetyDecision.allow)


def run_safety_cascade(query, refined, decisions, db, cfg, backends, templates, registry=None,
                       warnings=None) -> Tuple[SafetyVerdict, List[SafetyVerdict]]:
    """Every stage back to back; returns (final, all executed verdicts)."""
    cascade = SafetyCascade(cfg, backends, templates, db, registry)
    verdicts = []
    for step in (
        lambda: cascade.prefilter(query, warnings),
        lambda: cascade.check_intent(query, refined, warnings),
        lambda: cascade.check_categories(decisions, warnings) if registry is not None else [],
    ):
        verdicts.extend(step())
        if verdicts and not verdicts[-1].allowed:
            break
    return final_verdict(verdicts), verdicts
