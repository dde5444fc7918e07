"""Compare model label distributions with aggregated human votes.

Each story's votes become a distribution via min-subtract softmax; every
method's raw label scores are normalised the same way, then compared by
cosine similarity and ``KL(human || model)``. Per-story rows are summarised
into box-plot columns (min, q1, median, q3, max) plus the mean.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from carp.errors import DataError
from carp.model import CarpModel
from carp.zeroshot import ClassifierSpec, ScoreDistribution, normalize_scores, raw_scores

PROB_FLOOR = 1e-12
SUMMARY_COLUMNS = ("min", "q1", "median", "q3", "max", "mean")

Scorer = Callable[[str, str, Sequence[ClassifierSpec]], Sequence[float]]


@dataclass(frozen=True)
class HumanVotes:
    story_id: str
    labels: tuple[str, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "counts", tuple(self.counts))
        if len(self.labels) != len(self.counts):
            raise DataError(f"story {self.story_id}: {len(self.labels)} labels but {len(self.counts)} counts")
        if any(isinstance(c, bool) or not isinstance(c, int) or c < 0 for c in self.counts):
            raise DataError(f"story {self.story_id}: counts must be non-negative integers")
        if not any(self.counts):
            raise DataError(f"story {self.story_id}: no votes")


@dataclass(frozen=True)
class ComparisonRow:
    story_id: str
    cosine: float
    kl: float
    kl_infinite: bool = False


def human_distribution(votes: HumanVotes) -> ScoreDistribution:
    return ScoreDistribution(votes.labels, normalize_scores(votes.counts))


def kl_divergence(h: np.ndarray, m: np.ndarray) -> tuple[float, bool]:
    """``sum h ln(h/m)`` with 0 ln 0 = 0; model zeros are floored and flagged."""
    infinite = bool(np.any((h > 0) & (m <= 0)))
    m = np.maximum(m, PROB_FLOOR)
    support = h > 0
    return max(float(np.sum(h[support] * np.log(h[support] / m[support]))), 0.0), infinite


def compare(human: ScoreDistribution, model: ScoreDistribution, story_id: str = "") -> ComparisonRow:
    if human.labels != model.labels:
        raise DataError(f"label mismatch: {human.labels} vs {model.labels}")
    h, m = human.as_array(), model.as_array()
    cosine = float(np.clip(h @ m / (np.linalg.norm(h) * np.linalg.norm(m)), -1.0, 1.0))
    kl, infinite = kl_divergence(h, m)
    return ComparisonRow(story_id, cosine, kl, infinite)


def box_summary(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot summarise an empty sample")
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return {
        "min": float(arr.min()), "q1": float(q1), "median": float(med),
        "q3": float(q3), "max": float(arr.max()), "mean": float(arr.mean()),
    }


# scorers -----------------------------------------------------------------------


def model_scorer(model: CarpModel) -> Scorer:
    def scorer(story_id: str, text: str, specs: Sequence[ClassifierSpec]) -> np.ndarray:
        return raw_scores(model, text, specs)

    return scorer


class ExternalScores:
    """Raw scores produced elsewhere (e.g. a language-model baseline), keyed by story id.

    Higher must mean "more likely"; negate NLL-style scores before saving.
    """

    def __init__(self, scores: Mapping[str, Sequence[float]]):
        self.scores = {str(k): [float(x) for x in v] for k, v in scores.items()}

    def __call__(self, story_id: str, text: str, specs: Sequence[ClassifierSpec]) -> list[float]:
        try:
            scores = self.scores[story_id]
        except KeyError:
            raise DataError(f"external scores have no entry for story {story_id!r}") from None
        if len(scores) != len(specs):
            raise DataError(f"story {story_id!r}: {len(scores)} external scores for {len(specs)} labels")
        return scores

    @classmethod
    def load(cls, path: str | Path) -> ExternalScores:
        items = _read_json_list(path)
        try:
            return cls({item["story_id"]: item["raw_scores"] for item in items})
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad external score file ({exc})") from exc


class RandomEmbeddingScorer:
    """Cosines between pseudo-random unit vectors derived from each text's hash."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim, self.seed = dim, seed

    def _vector(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode()).digest()
        v = np.random.default_rng(int.from_bytes(digest[:8], "little")).normal(size=self.dim)
        return v / np.linalg.norm(v)

    def __call__(self, story_id: str, text: str, specs: Sequence[ClassifierSpec]) -> np.ndarray:
        story = self._vector(text)
        return np.array([np.mean([self._vector(v) @ story for v in spec.variants]) for spec in specs])


# suites ------------------------------------------------------------------------


@dataclass
class SuiteReport:
    rows: list[ComparisonRow]
    summary: dict[str, dict[str, float]]
    distributions: dict[str, ScoreDistribution]

    def to_json(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "summary": self.summary,
            "distributions": {k: v.to_json() for k, v in self.distributions.items()},
        }


def _as_scorer(method) -> Scorer:
    if isinstance(method, CarpModel):
        return model_scorer(method)
    if callable(method):
        return method
    raise TypeError(f"cannot score with {type(method).__name__}")


def evaluate_suite(
    method: CarpModel | Scorer,
    stories: Mapping[str, str],
    votes: Sequence[HumanVotes],
    specs: Sequence[ClassifierSpec],
) -> SuiteReport:
    """One comparison row per voted story, plus box-plot summaries of cosine and KL."""
    scorer = _as_scorer(method)
    labels = tuple(s.label for s in specs)
    rows, dists = [], {}
    for v in votes:
        if v.story_id not in stories:
            raise DataError(f"no story text for voted story {v.story_id!r}")
        if v.labels != labels:
            raise DataError(f"story {v.story_id!r}: vote labels do not match classifier labels")
        model_dist = ScoreDistribution(labels, normalize_scores(scorer(v.story_id, stories[v.story_id], specs)))
        dists[v.story_id] = model_dist
        rows.append(compare(human_distribution(v), model_dist, v.story_id))
    if not rows:
        raise DataError("no voted stories to evaluate")
    summary = {
        "cosine": box_summary([r.cosine for r in rows]),
        "kl": box_summary([r.kl for r in rows]),
    }
    return SuiteReport(rows, summary, dists)


def compare_methods(
    methods: Mapping[str, CarpModel | Scorer],
    stories: Mapping[str, str],
    votes: Sequence[HumanVotes],
    specs: Sequence[ClassifierSpec],
) -> dict[str, SuiteReport]:
    return {name: evaluate_suite(m, stories, votes, specs) for name, m in methods.items()}


def write_report(reports: Mapping[str, SuiteReport], out_dir: str | Path) -> None:
    """Write ``report.json``, per-story ``rows.csv`` and box-plot ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps({name: r.to_json() for name, r in reports.items()}, indent=2) + "\n", encoding="utf-8"
    )
    with open(out / "rows.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "story_id", "cosine", "kl", "kl_infinite"])
        for name, r in reports.items():
            for row in r.rows:
                w.writerow([name, row.story_id, repr(row.cosine), repr(row.kl), row.kl_infinite])
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", *SUMMARY_COLUMNS])
        for name, r in reports.items():
            for metric, stats in r.summary.items():
                w.writerow([name, metric, *(repr(stats[c]) for c in SUMMARY_COLUMNS)])


# file formats ------------------------------------------------------------------


def _read_json_list(path: str | Path) -> list:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(data, list):
        raise DataError(f"{path}: expected a JSON list")
    return data


def load_votes(path: str | Path) -> list[HumanVotes]:
    try:
        return [HumanVotes(str(v["story_id"]), v["labels"], v["counts"]) for v in _read_json_list(path)]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad votes file ({exc})") from exc


def load_stories(path: str | Path) -> dict[str, str]:
    try:
        return {str(s["story_id"]): s["text"] for s in _read_json_list(path)}
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad stories file ({exc})") from exc
