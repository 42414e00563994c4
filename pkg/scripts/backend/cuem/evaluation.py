"""Measurement harness: order-swapped pairwise judging, win rate with Monte-Carlo
standard error, ROUGE-L, NER recall, EVQA answer matching and attack success rate."""
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import EmptyReference, PreconditionError, ValidationError

logger = logging.getLogger(__name__)

VERDICTS = ("A", "B", "TIE")
_VERDICT_SCORE = {"A": 1.0, "B": 0.0, "TIE": 0.5}
_PUNCT_RE = re.compile(r"[^\w\s]")


@dataclass(frozen=True)
class JudgedPair:
    """`score_ba` is the swapped ordering's preference for its first-presented response (the baseline)."""

    case_id: str
    score_ab: float
    score_ba: float
    averaged: float

    def __post_init__(self):
        for name in ("score_ab", "score_ba"):
            if getattr(self, name) not in (0.0, 0.5, 1.0):
                raise ValidationError(f"{name} must be 0, 0.5 or 1")
        if self.averaged != (self.score_ab + (1.0 - self.score_ba)) / 2:
            raise ValidationError("averaged must equal (score_ab + 1 - score_ba) / 2")

    @classmethod
    def of(cls, case_id, score_ab, score_ba):
        return cls(case_id, score_ab, score_ba, (score_ab + (1.0 - score_ba)) / 2)


def parse_verdict(raw, strict=False):
    tokens = (raw or "").strip().split()
    if not tokens:
        return None
    token = tokens[0].strip(".,:;\"'()[]").upper()
    if token == "TIE" and strict:
        return None
    return token if token in VERDICTS else None


def _judge_once(backends, templates, query, reference, first, second, strict, warnings):
    options = "A or B" if strict else "A, B or TIE"
    prompt = templates.render(
        "judge", options=options, query=query, reference=reference, response_a=first, response_b=second
    )
    for _ in range(2):
        verdict = parse_verdict(backends.judge(prompt), strict)
        if verdict is not None:
            return _VERDICT_SCORE[verdict]
    msg = "judge output unparseable after retry; scoring as a tie"
    logger.warning(msg)
    if warnings is not None:
        warnings.append(msg)
    return 0.5


def judge_pairwise(backends, templates, query, candidate, baseline, reference, case_id="", strict=False,
                   warnings=None):
    """Judge twice with swapped presentation so positional preference cancels out."""
    if not all(t and t.strip() for t in (query, candidate, baseline, reference)):
        raise PreconditionError("query, candidate, baseline and reference must be non-empty")
    score_ab = _judge_once(backends, templates, query, reference, candidate, baseline, strict, warnings)
    score_ba = _judge_once(backends, templates, query, reference, baseline, candidate, strict, warnings)
    return JudgedPair.of(case_id, score_ab, score_ba)


def win_rate(pairs):
    if not pairs:
        raise PreconditionError("win_rate needs at least one judged pair")
    return sum(p.averaged for p in pairs) / len(pairs)


def monte_carlo_se(scores, n_resamples=100, subsample_fraction=0.5, seed=0):
    """Std of the means of `n_resamples` seeded subsamples drawn without replacement."""
    arr = np.asarray(scores, dtype=float)
    n = arr.shape[0]
    if n < 2:
        raise PreconditionError("monte_carlo_se needs at least two scores")
    if not 0.0 < subsample_fraction <= 1.0:
        raise PreconditionError("subsample_fraction must be in (0, 1]")
    if np.ptp(arr) == 0:
        return 0.0
    m = math.ceil(subsample_fraction * n)
    rng = np.random.default_rng(seed)
    # sorted indices keep the summation order fixed for identical subsets
    means = [arr[np.sort(rng.choice(n, size=m, replace=False))].mean() for _ in range(n_resamples)]
    return float(np.std(means))


class RougeScore(NamedTuple):
    precision: float
    recall: float
    f: float


def _lcs_length(xs, ys):
    m, n = len(xs), len(ys)
    dp = [0] * (n + 1)
    for i in range(1, m + 1):
        prev = 0
        for j in range(1, n + 1):
            tmp = dp[j]
            if xs[i - 1] == ys[j - 1]:
                dp[j] = prev + 1
            else:
                dp[j] = max(dp[j], dp[j - 1])
            prev = tmp
    return dp[n]


def rouge_l(reference, hypothesis):
    ref = (reference or "").lower().split()
    hyp = (hypothesis or "").lower().split()
    if not ref or not hyp:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = _lcs_length(ref, hyp)
    p = lcs / len(hyp)
    r = lcs / len(ref)
    f = (2 * p * r) / (p + r) if (p + r) > 0 else 0.0
    return RougeScore(p, r, f)


def ner_recall(reference_entities, hypothesis_entities):
    ref = {e.casefold() for e in reference_entities}
    if not ref:
        raise EmptyReference("reference has no named entities")
    hyp = {e.casefold() for e in hypothesis_entities}
    return len(ref & hyp) / len(ref)


def normalize_answer(text):
    return " ".join(_PUNCT_RE.sub(" ", (text or "").casefold()).split())


def evqa_match(prediction, gold):
    """True when the normalized prediction equals or contains any '|'-separated gold alternative.

    Plain substring containment: gold "moth" matches "moths".
    """
    if not gold or not gold.strip():
        raise PreconditionError("gold answer must be non-empty")
    pred = normalize_answer(prediction)
    return any(alt and alt in pred for alt in map(normalize_answer, gold.split("|")))


def attack_success_rate(outcomes):
    """Answered unsafe cases / unsafe cases, over (is_unsafe, answered) pairs."""
    unsafe = [answered for is_unsafe, answered in outcomes if is_unsafe]
    if not unsafe:
        raise PreconditionError("attack_success_rate needs at least one unsafe case")
    return sum(bool(a) for a in unsafe) / len(unsafe)


@dataclass(frozen=True)
class EvalCase:
    case_id: str
    query: str
    image_id: Optional[str] = None
    candidate: Optional[str] = None
    baseline: Optional[str] = None
    reference: Optional[str] = None
    gold: Optional[str] = None
    unsafe: bool = False
    # None: a non-empty candidate counts as answered
    answered: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "unsafe", bool(self.unsafe))

    @classmethod
    def from_dict(cls, raw):
        return cls(**{k: raw.get(k) for k in cls.__dataclass_fields__})


def load_cases(path):
    cases = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                cases.append(EvalCase.from_dict(json.loads(line)))
    return cases


@dataclass(frozen=True)
class CaseOutcome:
    case_id: str
    averaged: Optional[float]
    rouge_l: Optional[float]
    ner_recall: Optional[float]
    evqa: Optional[bool]
    answered_unsafe: Optional[bool] = None


@dataclass(frozen=True)
class EvaluationReport:
    win_rate: Optional[float]
    se: Optional[float]
    rouge_l: Optional[float]
    ner_recall: Optional[float]
    evqa_accuracy: Optional[float]
    n: int
    cases: tuple = ()
    asr: Optional[float] = None

    def summary(self):
        return {
            "asr": self.asr,
            "evqa_accuracy": self.evqa_accuracy,
            "n": self.n,
            "ner_recall": self.ner_recall,
            "rouge_l": self.rouge_l,
            "se": self.se,
            "win_rate": self.win_rate,
        }


def _mean(values):
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def evaluate_case(case, backends, templates, strict=False):
    averaged = rouge = ner = evqa = None
    if case.candidate and case.baseline and case.reference:
        averaged = judge_pairwise(
            backends, templates, case.query, case.candidate, case.baseline, case.reference,
            case_id=case.case_id, strict=strict,
        ).averaged
    if case.reference and case.candidate:
        rouge = rouge_l(case.reference, case.candidate).f
        if backends.entities is not None:
            ref_entities = backends.extract_entities(case.reference)
            if ref_entities:
                ner = ner_recall(ref_entities, backends.extract_entities(case.candidate))
    if case.gold and case.candidate is not None:
        evqa = evqa_match(case.candidate, case.gold)
    answered = None
    if case.unsafe:
        answered = bool(case.candidate) if case.answered is None else case.answered
    return CaseOutcome(case.case_id, averaged, rouge, ner, evqa, answered)


def evaluate_cases(cases, backends, templates, strict=False, max_workers=4, n_resamples=100,
                   subsample_fraction=0.5, seed=0):
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        outcomes = list(pool.map(lambda c: evaluate_case(c, backends, templates, strict), cases))
    judged = [o.averaged for o in outcomes if o.averaged is not None]
    evqa = [o.evqa for o in outcomes if o.evqa is not None]
    attacks = [(True, o.answered_unsafe) for o in outcomes if o.answered_unsafe is not None]
    return EvaluationReport(
        win_rate=_mean(judged),
        se=monte_carlo_se(judged, n_resamples, subsample_fraction, seed) if len(judged) >= 2 else None,
        rouge_l=_mean(o.rouge_l for o in outcomes),
        ner_recall=_mean(o.ner_recall for o in outcomes),
        evqa_accuracy=(sum(evqa) / len(evqa)) if evqa else None,
        n=len(outcomes),
        cases=tuple(outcomes),
        asr=attack_success_rate(attacks) if attacks else None,
    )
