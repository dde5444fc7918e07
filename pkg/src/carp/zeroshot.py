"""Zero-shot story scoring against natural-language review classifiers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from carp import numerics as nx
from carp.errors import DataError, DegenerateInputError
from carp.model import CarpModel

NINE_REVIEWS = (
    "This kind of drags on.",
    "This is a bit too short.",
    "This is too cheery.",
    "This is really depressing.",
    "This is really exciting.",
    "This is boring.",
    "This ending leaves things too open.",
    "This ending feels abrupt.",
    "Could use more visual imagery.",
)


@dataclass(frozen=True)
class ClassifierSpec:
    """A label plus the review phrasings whose mean cosine scores it."""

    label: str
    variants: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        if not self.variants:
            raise ValueError(f"classifier {self.label!r} has no variants")
        if not all(isinstance(v, str) and v.strip() for v in self.variants):
            raise ValueError(f"classifier {self.label!r} has an empty variant")

    @classmethod
    def single(cls, review: str) -> ClassifierSpec:
        return cls(review, (review,))

    def to_json(self) -> dict:
        return {"label": self.label, "variants": list(self.variants)}


@dataclass(frozen=True)
class ScoreDistribution:
    labels: tuple[str, ...]
    probabilities: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "probabilities", tuple(float(p) for p in self.probabilities))
        if len(self.labels) != len(self.probabilities):
            raise ValueError("labels and probabilities differ in length")
        if any(p < 0 for p in self.probabilities) or abs(sum(self.probabilities) - 1.0) > 1e-6:
            raise ValueError("probabilities must be non-negative and sum to 1")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probabilities, dtype=np.float64)

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "probabilities": list(self.probabilities)}


def normalize_scores(raw: Sequence[float]) -> np.ndarray:
    """Subtract the minimum, then softmax."""
    s = np.asarray(raw, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("need a non-empty score vector")
    return nx.softmax(nx.Tensor(s - s.min())).data


CARP_PROMPTING = (
    ClassifierSpec("Positive (smiley)", (":)",)),
    ClassifierSpec("Wording or grammar issue", ("[quote] ...",)),
    ClassifierSpec("Show, don't tell", ("Show, don't tell.",)),
)

PRESETS = {
    "nine-reviews": tuple(ClassifierSpec.single(r) for r in NINE_REVIEWS),
    "carp-prompting": CARP_PROMPTING,
}


def load_preset(name: str) -> list[ClassifierSpec]:
    try:
        return list(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_specs(path: str | Path) -> list[ClassifierSpec]:
    """Read a JSON list of ``{label, variants}`` objects."""
    try:
        items = json.loads(Path(path).read_text(encoding="utf-8"))
        return [ClassifierSpec(item["label"], item["variants"]) for item in items]
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: bad classifier spec file ({exc})") from exc


def _story_embedding(model: CarpModel, story: str) -> np.ndarray:
    if not story or not story.strip():
        raise DegenerateInputError("story is empty")
    return model.embed_texts([story], "passage")[0]


def raw_scores(model: CarpModel, story: str, specs: Sequence[ClassifierSpec]) -> np.ndarray:
    """Mean story/variant cosine for each spec, embedding every variant once."""
    story_vec = _story_embedding(model, story)
    variants = [v for spec in specs for v in spec.variants]
    cosines = model.embed_texts(variants, "critique").astype(np.float64) @ story_vec.astype(np.float64)
    bounds = np.cumsum([len(spec.variants) for spec in specs])[:-1]
    return np.array([chunk.mean() for chunk in np.split(cosines, bounds)])


def score(model: CarpModel, story: str, spec: ClassifierSpec) -> float:
    """Average cosine similarity between the story and the spec's variants, in [-1, 1]."""
    if not spec.variants:
        raise ValueError("classifier has no variants")
    return float(np.clip(raw_scores(model, story, [spec])[0], -1.0, 1.0))


def classify(model: CarpModel, story: str, specs: Sequence[ClassifierSpec]) -> ScoreDistribution:
    if len(specs) < 2:
        raise ValueError("classification needs at least two classifiers")
    return ScoreDistribution(tuple(s.label for s in specs), normalize_scores(raw_scores(model, story, specs)))


def rank_reviews(model: CarpModel, story: str, candidates: Sequence[str]) -> list[tuple[str, float]]:
    """Candidates by descending cosine to the story; ties keep input order."""
    if not candidates:
        raise ValueError("no candidate reviews")
    story_vec = _story_embedding(model, story).astype(np.float64)
    cosines = model.embed_texts(list(candidates), "critique").astype(np.float64) @ story_vec
    ranked = sorted(zip(candidates, cosines.tolist()), key=lambda rc: -rc[1])
    return [(review, float(np.clip(c, -1.0, 1.0))) for review, c in ranked]
