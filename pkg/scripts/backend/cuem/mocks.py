"""Deterministic mock backends driven by fixture tables.

Every mock is pure: identical inputs give byte-identical outputs. Fixture
tables are built once and never mutated, so mocks are safe to share across
concurrent requests.
"""
import hashlib
import logging
import math
import re
from collections import Counter

import numpy as np

from .backends import SafetyScore, matches_domain
from .errors import ConnectorFailure, UnknownImage
from .utils import tokenize

logger = logging.getLogger(__name__)

TASK_TAG_RE = re.compile(r"<\|task\|>\s*(\S+)")
USER_MARK = "<|user|>"
API_ID_RE = re.compile(r"API id:\s*(\S+)")


def user_section(prompt):
    """Text after the first user marker; the whole prompt when there is none."""
    idx = prompt.find(USER_MARK)
    return prompt if idx < 0 else prompt[idx + len(USER_MARK):]


class MockGenerator:
    """Resolves the output through the task named by the prompt's `<|task|>` tag.

    table: {task: {"default": str, "entries": [{"match": str, "output": str}]}}.
    Entries are tried in order; `match` is a case-insensitive substring of the
    user section of the prompt.
    """

    def __init__(self, table, default="UNKNOWN"):
        self.default = default
        self._table = {
            task: (
                spec.get("default"),
                tuple((e["match"].casefold(), e["output"]) for e in spec.get("entries", ())),
            )
            for task, spec in (table or {}).items()
        }

    def generate(self, prompt, params=None):
        m = TASK_TAG_RE.search(prompt)
        if not m or m.group(1) not in self._table:
            return self.default
        task_default, entries = self._table[m.group(1)]
        haystack = user_section(prompt).casefold()
        for needle, output in entries:
            if needle in haystack:
                return output
        return self.default if task_default is None else task_default


class ScriptedGenerator:
    """Returns queued outputs in order, repeating the last one."""

    def __init__(self, outputs):
        self.outputs = list(outputs)
        self.prompts = []

    def generate(self, prompt, params=None):
        self.prompts.append(prompt)
        idx = min(len(self.prompts), len(self.outputs)) - 1
        return self.outputs[idx]


class MockDescriber:
    def __init__(self, captions):
        self._captions = dict(captions)

    def describe_image(self, image):
        try:
            return self._captions[image.content_digest]
        except KeyError:
            raise UnknownImage(f"no caption for image {image.id}") from None


class MockTokenScorer:
    """likelihood = trigger hits / lexicon size, for the API named in the prompt."""

    def __init__(self, lexicons):
        self._lexicons = {api_id: frozenset(t.casefold() for t in terms) for api_id, terms in lexicons.items()}

    def positive_likelihood(self, prompt, positive_token):
        m = API_ID_RE.search(prompt)
        lexicon = self._lexicons.get(m.group(1)) if m else None
        if not lexicon:
            return 0.0
        tokens = set(tokenize(user_section(prompt)))
        return len(lexicon & tokens) / len(lexicon)


class MockEmbedder:
    """Seeded signed hash features over tokens, L2-normalized."""

    def __init__(self, dim=64, seed=0):
        self.dim = dim
        self.seed = seed

    def _bucket(self, feature):
        h = hashlib.sha256(f"{self.seed}:{feature}".encode("utf-8")).digest()
        index = int.from_bytes(h[:4], "big") % self.dim
        sign = 1.0 if h[4] % 2 == 0 else -1.0
        return index, sign

    def embed(self, text):
        vec = np.zeros(self.dim, dtype=float)
        for token, count in Counter(tokenize(text)).items():
            index, sign = self._bucket(token)
            vec[index] += sign * count
        if not vec.any():
            # punctuation-only text, or colliding features that cancel out
            index, sign = self._bucket("\x00" + text)
            vec[index] = sign
        return vec / np.linalg.norm(vec)


class JaccardNli:
    def nli_score(self, premise, hypothesis):
        a, b = set(tokenize(premise)), set(tokenize(hypothesis))
        if not a and not b:
            return 1.0 if premise == hypothesis else 0.0
        return len(a & b) / len(a | b)


class Bm25Index:
    """Okapi BM25 over title and body tokens, with a non-negative idf."""

    def __init__(self, docs, k1=1.5, b=0.75):
        self.k1 = k1
        self.b = b
        self.docs = list(docs)
        self._tf = [Counter(tokenize(d.text)) for d in self.docs]
        self._len = [sum(tf.values()) for tf in self._tf]
        self._avgdl = (sum(self._len) / len(self._len)) if self._len else 0.0
        df = Counter()
        for tf in self._tf:
            df.update(tf.keys())
        n = len(self.docs)
        self._idf = {t: math.log(1.0 + (n - f + 0.5) / (f + 0.5)) for t, f in df.items()}

    def scores(self, query):
        terms = set(tokenize(query))
        out = []
        for i, tf in enumerate(self._tf):
            score = 0.0
            norm = self.k1 * (1 - self.b + self.b * (self._len[i] / self._avgdl)) if self._avgdl else self.k1
            for t in terms:
                f = tf.get(t)
                if f:
                    score += self._idf[t] * f * (self.k1 + 1) / (f + norm)
            out.append(score)
        return out

    def search(self, query, k, domain_filter=None):
        hits = [
            (score, doc)
            for score, doc in zip(self.scores(query), self.docs)
            if score > 0 and matches_domain(doc, domain_filter)
        ]
        hits.sort(key=lambda h: (-h[0], h[1].id))
        return [doc.with_retrieval_score(score) for score, doc in hits[:k]]


class MockImageSearch:
    def __init__(self, neighbors):
        # digest -> [(Document, similarity)]
        self._neighbors = {
            digest: tuple(sorted(pairs, key=lambda p: (-p[1], p[0].id))) for digest, pairs in neighbors.items()
        }

    def search(self, image, k):
        try:
            pairs = self._neighbors[image.content_digest]
        except KeyError:
            raise UnknownImage(f"image {image.id} is not indexed") from None
        return list(pairs[:k])


class BlocklistTextSafety:
    def __init__(self, terms):
        self.terms = tuple(t.casefold() for t in terms if t.strip())
        self._patterns = [re.compile(r"\b" + re.escape(t) + r"\b") for t in self.terms]

    def classify(self, text):
        folded = (text or "").casefold()
        if folded and any(p.search(folded) for p in self._patterns):
            return SafetyScore(True, 1.0)
        return SafetyScore(False, 0.0)


class DigestImageSafety:
    def __init__(self, flagged, known):
        self.flagged = frozenset(flagged)
        self.known = frozenset(known) | self.flagged

    def classify(self, image):
        if image.content_digest in self.flagged:
            return SafetyScore(True, 1.0)
        if image.content_digest not in self.known:
            return SafetyScore(False, 0.0, f"image {image.id} unknown to the image classifier")
        return SafetyScore(False, 0.0)


class LexicalRelevance:
    """|q ∩ d| / |q| over token sets."""

    def score(self, query, doc):
        q = set(tokenize(query))
        if not q:
            return 0.0
        return len(q & set(tokenize(doc.text))) / len(q)


class FixtureConnector:
    def __init__(self, items, category, fail=False):
        self.category = category
        self.fail = fail
        self._index = Bm25Index([d.with_source(category) for d in items])

    def search(self, query, k):
        if self.fail:
            raise ConnectorFailure(f"{self.category.value} connector is down")
        return self._index.search(query, k)


JUDGE_A_RE = re.compile(r"\[Response A\]\n(.*?)\n\[Response B\]", re.S)
JUDGE_B_RE = re.compile(r"\[Response B\]\n(.*?)\n\[Verdict\]", re.S)


class _PairJudge:
    def generate(self, prompt, params=None):
        a = JUDGE_A_RE.search(prompt)
        b = JUDGE_B_RE.search(prompt)
        if not a or not b:
            return "UNPARSEABLE"
        return self.prefer(a.group(1).strip(), b.group(1).strip())

    def prefer(self, first, second):
        raise NotImplementedError


class LengthJudge(_PairJudge):
    def prefer(self, first, second):
        if len(first) == len(second):
            return "TIE"
        return "A" if len(first) > len(second) else "B"


class FirstPositionJudge(_PairJudge):
    def prefer(self, first, second):
        return "A"


class CapitalizedSpanExtractor:
    SPAN_RE = re.compile(r"\b[A-Z][\w'-]*(?:\s+[A-Z][\w'-]*)*")

    def extract(self, text):
        return {m.group(0) for m in self.SPAN_RE.finditer(text or "")}


class ExampleLookupGenerator:
    """Answers a rendered tuning prompt from the in-context examples it carries.

    The final `Input:` is matched by its first token against the example
    inputs; a hit returns that example's label, a miss returns `miss`.
    """

    SLOT_RE = re.compile(r"^Input: (.*)\nLabel: (.*)$", re.M)
    LAST_RE = re.compile(r"Input: (.*)\nLabel:\s*$")

    def __init__(self, miss="unknown"):
        self.miss = miss

    @staticmethod
    def _key(text):
        tokens = tokenize(text)
        return tokens[0] if tokens else ""

    def generate(self, prompt, params=None):
        last = self.LAST_RE.search(prompt)
        if not last:
            return self.miss
        key = self._key(last.group(1))
        for slot_input, label in self.SLOT_RE.findall(prompt[: last.start()]):
            if self._key(slot_input) == key:
                return label.strip()
        return self.miss
