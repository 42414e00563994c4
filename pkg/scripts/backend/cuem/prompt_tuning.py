"""Automatic prompt tuning with forward and backward passes.

The forward pass predicts labels for training samples with the current
template. The backward pass samples correct and incorrect predictions and puts
them back into the template as in-context examples, with incorrect ones
carrying the true label. Validation accuracy picks the version to keep.
"""
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, NamedTuple, Tuple

import numpy as np

from .errors import BackendUnavailable, PreconditionError, TemplateError, TuningAborted, ValidationError
from .utils import canonical_json, digest

logger = logging.getLogger(__name__)

SECTION_BREAK = "\n\n<|section|>\n\n"
_FILE_RE = re.compile(r"^(?P<id>.+)\.v(?P<version>\d+)\.txt$")


def normalize_label(text):
    return " ".join(str(text).casefold().split())


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    version: int
    fixed_sections: Tuple[str, ...]
    instruction_section: str
    example_slots: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.template_id:
            raise ValidationError("template_id must be non-empty")
        if self.version < 0:
            raise ValidationError("version must be >= 0")
        object.__setattr__(self, "fixed_sections", tuple(self.fixed_sections))
        object.__setattr__(self, "example_slots", tuple((str(i), str(l)) for i, l in self.example_slots))

    @property
    def fixed_digest(self):
        return digest(list(self.fixed_sections))

    def render(self, item):
        parts = list(self.fixed_sections)
        if self.instruction_section:
            parts.append(self.instruction_section)
        parts.extend(f"Input: {i}\nLabel: {l}" for i, l in self.example_slots)
        parts.append(f"Input: {item}\nLabel:")
        return "\n\n".join(parts)


class Prediction(NamedTuple):
    input: str
    predicted: str
    label: str
    correct: bool


@dataclass(frozen=True)
class TuningReport:
    iterations: int
    scores: Tuple[float, ...]
    best_version: int
    versions: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(self.scores))
        object.__setattr__(self, "versions", tuple(self.versions))
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ValidationError("validation scores must be in [0, 1]")

    @property
    def best_score(self):
        return self.scores[self.versions.index(self.best_version)] if self.scores else 0.0


def forward_pass(tpl, samples, backends, max_workers=4) -> List[Prediction]:
    if not samples:
        raise PreconditionError("forward pass needs at least one sample")

    def _predict(sample):
        item, label = sample
        predicted = backends.generate(tpl.render(item)).strip()
        return Prediction(item, predicted, label, normalize_label(predicted) == normalize_label(label))

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_predict, samples))


def accuracy(predictions):
    return sum(p.correct for p in predictions) / len(predictions)


def backward_pass(tpl, results, n_correct=2, n_incorrect=2, seed=0, warnings=None):
    if n_correct < 0 or n_incorrect < 0:
        raise PreconditionError("example counts must be >= 0")
    rng = np.random.default_rng(seed)
    correct = [r for r in results if r.correct]
    incorrect = [r for r in results if not r.correct]
    if len(correct) < n_correct or len(incorrect) < n_incorrect:
        msg = (f"asked for {n_correct} correct and {n_incorrect} incorrect examples, "
               f"have {len(correct)} and {len(incorrect)}")
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)

    def _sample(pool, n):
        if not pool or n == 0:
            return []
        picked = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
        return [pool[int(i)] for i in picked]

    slots = [(r.input, r.label) for r in _sample(correct, n_correct) + _sample(incorrect, n_incorrect)]
    return replace(tpl, version=tpl.version + 1, example_slots=tuple(slots))


def tune(tpl0, train, val, iters, backends, n_correct=2, n_incorrect=2, seed=0, max_workers=4, warnings=None):
    """Returns (best template, report); the baseline counts as version tpl0.version."""
    if iters < 1:
        raise PreconditionError("iters must be >= 1")
    if not train or not val:
        raise PreconditionError("train and val must be non-empty")
    if {i for i, _ in train} & {i for i, _ in val}:
        raise PreconditionError("train and val must be disjoint")

    scores, versions = [], []
    best, best_score = tpl0, None
    current = tpl0
    done = 0
    try:
        scores.append(accuracy(forward_pass(tpl0, val, backends, max_workers)))
        versions.append(tpl0.version)
        best_score = scores[0]
        for iteration in range(1, iters + 1):
            results = forward_pass(current, train, backends, max_workers)
            current = backward_pass(current, results, n_correct, n_incorrect, [seed, iteration], warnings)
            score = accuracy(forward_pass(current, val, backends, max_workers))
            scores.append(score)
            versions.append(current.version)
            done = iteration
            logger.info("Tuning %s v%d: validation %.3f", current.template_id, current.version, score)
            if score > best_score:
                best, best_score = current, score
    except BackendUnavailable as e:
        partial = TuningReport(done, scores, best.version if scores else tpl0.version, versions)
        raise TuningAborted(partial, e) from e
    return best, TuningReport(done, scores, best.version, versions)


def save_template(tpl, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"{tpl.template_id}.v{tpl.version}"
    text = SECTION_BREAK.join(list(tpl.fixed_sections) + [tpl.instruction_section])
    (directory / f"{stem}.txt").write_text(text, encoding="utf-8")
    meta = {
        "example_slots": [{"input": i, "label": l} for i, l in tpl.example_slots],
        "fixed_section_count": len(tpl.fixed_sections),
        "template_id": tpl.template_id,
        "version": tpl.version,
    }
    (directory / f"{stem}.json").write_text(canonical_json(meta), encoding="utf-8")
    return directory / f"{stem}.txt"


def load_template(directory, template_id, version=None):
    directory = Path(directory)
    if version is None:
        found = [int(m.group("version")) for p in directory.glob(f"{template_id}.v*.txt")
                 if (m := _FILE_RE.match(p.name)) and m.group("id") == template_id]
        if not found:
            raise TemplateError(f"no saved versions of {template_id!r} in {directory}")
        version = max(found)
    stem = directory / f"{template_id}.v{version}"
    try:
        text = stem.with_suffix(".txt").read_text(encoding="utf-8")
        meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise TemplateError(f"cannot load {stem}: {e}") from e
    sections = text.split(SECTION_BREAK)
    n_fixed = meta["fixed_section_count"]
    if len(sections) != n_fixed + 1:
        raise TemplateError(f"{stem}.txt has {len(sections)} sections, expected {n_fixed + 1}")
    return PromptTemplate(
        template_id=meta["template_id"],
        version=meta["version"],
        fixed_sections=tuple(sections[:n_fixed]),
        instruction_section=sections[n_fixed],
        example_slots=tuple((s["input"], s["label"]) for s in meta["example_slots"]),
    )


def load_samples(path):
    """JSON-lines of {"input", "label"}."""
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                samples.append((str(rec["input"]), str(rec["label"])))
    return samples
