"""Cross-encoder relevance scoring, top-k curation and relevance training-set construction."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import PreconditionError, ValidationError
from .utils import canonical_json

logger = logging.getLogger(__name__)

POSITIVE_THRESHOLD = 0.9
NEGATIVE_THRESHOLD = 0.3
NEGATIVE_RATIO = 4


class RelevanceLabel(str, Enum):
    positive = "positive"
    negative = "negative"


@dataclass(frozen=True)
class RelevanceExample:
    query: str
    document_text: str
    label: RelevanceLabel
    nli_score: float
    pos_thr: float = field(default=POSITIVE_THRESHOLD, compare=False, repr=False)
    neg_thr: float = field(default=NEGATIVE_THRESHOLD, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "label", RelevanceLabel(self.label))
        if not 0.0 <= self.nli_score <= 1.0:
            raise ValidationError("nli_score must be in [0, 1]")
        if self.label is RelevanceLabel.positive and not self.nli_score > self.pos_thr:
            raise ValidationError(f"positive example needs nli_score > {self.pos_thr}")
        if self.label is RelevanceLabel.negative and not self.nli_score < self.neg_thr:
            raise ValidationError(f"negative example needs nli_score < {self.neg_thr}")

    def to_record(self):
        return {
            "document_text": self.document_text,
            "label": self.label.value,
            "nli_score": self.nli_score,
            "query": self.query,
        }


def score_relevance(query, doc, backends):
    return backends.score_relevance(query, doc)


def _rank_key(doc):
    return (-doc.relevance_score, -doc.retrieval_score, doc.id)


def select_top_k(query, docs, k, backends, max_workers=4):
    """Top-k docs carrying relevance_score, ordered by (relevance, retrieval score, id)."""
    if k < 1:
        raise PreconditionError("k must be >= 1")
    docs = list(docs)
    if not docs:
        return []
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        scores = list(pool.map(lambda d: score_relevance(query, d, backends), docs))
    scored = [d.with_relevance(min(1.0, max(0.0, s))) for d, s in zip(docs, scores)]
    return sorted(scored, key=_rank_key)[:k]


def select_top_k_by_retrieval(docs, k):
    """Curation without the relevance classifier."""
    return sorted(docs, key=lambda d: (-d.retrieval_score, d.id))[:k]


def build_training_set(pairs, candidates, backends, pos_thr=POSITIVE_THRESHOLD, neg_thr=NEGATIVE_THRESHOLD,
                       neg_ratio=NEGATIVE_RATIO, seed=0, warnings=None):
    """Positives above `pos_thr`, negatives sampled below `neg_thr` at `neg_ratio` per positive.

    Documents are the NLI premise and the gold answer the hypothesis. Mid-band
    documents are discarded and a pair without any positive contributes nothing.
    """
    if neg_ratio < 1:
        raise PreconditionError("neg_ratio must be >= 1")
    if not neg_thr < pos_thr:
        raise PreconditionError("neg_thr must be below pos_thr")

    texts = [d.body for d in candidates if d.body.strip()]
    examples = []
    for index, (query, gold) in enumerate(pairs):
        scores = [backends.nli_score(text, gold) for text in texts]
        positives = [(t, s) for t, s in zip(texts, scores) if s > pos_thr]
        if not positives:
            logger.debug("No positive document for %r; skipping", query)
            continue
        negatives = [(t, s) for t, s in zip(texts, scores) if s < neg_thr]
        wanted = neg_ratio * len(positives)
        if len(negatives) < wanted:
            msg = f"only {len(negatives)} negatives for {query!r}, wanted {wanted}"
            logger.warning(msg)
            if warnings is not None:
                warnings.append(msg)
        rng = np.random.default_rng([seed, index])
        picked = rng.choice(len(negatives), size=min(wanted, len(negatives)), replace=False) if negatives else []
        for text, s in positives:
            examples.append(RelevanceExample(query, text, RelevanceLabel.positive, s, pos_thr, neg_thr))
        for i in picked:
            text, s = negatives[int(i)]
            examples.append(RelevanceExample(query, text, RelevanceLabel.negative, s, pos_thr, neg_thr))
    return examples


def export_training_set(examples, path):
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(canonical_json(ex.to_record()) + "\n")


def import_training_set(path, pos_thr=POSITIVE_THRESHOLD, neg_thr=NEGATIVE_THRESHOLD):
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                examples.append(RelevanceExample(
                    rec["query"], rec["document_text"], rec["label"], float(rec["nli_score"]), pos_thr, neg_thr
                ))
    return examples
