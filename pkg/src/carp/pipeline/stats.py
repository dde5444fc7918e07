"""Critique length / sentiment / toxicity statistics for a pair corpus.

Scorers are plain callables so real classifiers can be dropped in. The
lexicon scorers shipped here are crude defaults, good enough to exercise
the report on a laptop.
"""

from __future__ import annotations

import math
import re
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from carp.pipeline.records import PassageCritiquePair

SentimentScorer = Callable[[str], str]
ToxicityScorer = Callable[[str], Mapping[str, float]]

DEFAULT_TOXICITY_THRESHOLD = 0.01
SENTIMENTS = ("positive", "negative")

_WORD_RE = re.compile(r"[a-z']+|[:;]-?[()dp]", re.IGNORECASE)

POSITIVE_WORDS = frozenset(
    "good great love loved like liked nice enjoy enjoyed excellent amazing awesome wonderful beautiful "
    "fantastic brilliant fun interesting vivid strong clear well best perfect :) :-) :d ;)".split()
)
NEGATIVE_WORDS = frozenset(
    "bad boring confusing confused awkward weak wrong unclear odd hate dislike slow drags abrupt "
    "unnecessary cut problem issue clunky repetitive flat not don't doesn't isn't never terrible awful "
    "worst :( :-(".split()
)
TOXIC_WORDS = frozenset("stupid idiot idiotic hate crap sucks garbage trash dumb pathetic moron awful terrible".split())
INSULT_WORDS = frozenset("idiot idiotic stupid moron dumb loser pathetic incompetent".split())


def _words(text: str) -> list[str]:
    return [w.lower() for w in _WORD_RE.findall(text)]


def lexicon_sentiment(text: str) -> str:
    words = _words(text)
    score = sum(w in POSITIVE_WORDS for w in words) - sum(w in NEGATIVE_WORDS for w in words)
    return "negative" if score < 0 else "positive"


def lexicon_toxicity(text: str) -> dict[str, float]:
    words = _words(text)
    toxic = sum(w in TOXIC_WORDS for w in words)
    insult = sum(w in INSULT_WORDS for w in words)
    return {"toxicity": 1.0 - 0.5**toxic, "insult": 1.0 - 0.5**insult}


def length_summary(lengths: Sequence[int]) -> dict | None:
    if not lengths:
        return None
    arr = np.asarray(lengths, dtype=float)
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    return {
        "count": len(lengths),
        "mean": float(arr.mean()),
        "min": float(arr.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(arr.max()),
    }


def corpus_stats(
    pairs: Iterable[PassageCritiquePair],
    sentiment_scorer: SentimentScorer = lexicon_sentiment,
    toxicity_scorer: ToxicityScorer = lexicon_toxicity,
    threshold: float = DEFAULT_TOXICITY_THRESHOLD,
    measures: Sequence[str] = ("toxicity", "insult"),
    sample_size: int | None = None,
    seed: int = 0,
) -> dict:
    """Length quartiles by sentiment and the share of negative critiques scoring above ``threshold``.

    Records whose scorer raises or returns an out-of-range value are
    excluded and counted under ``scorer_failures``.
    """
    pairs = list(pairs)
    if sample_size is not None and sample_size < len(pairs):
        idx = np.sort(np.random.default_rng(seed).choice(len(pairs), sample_size, replace=False))
        pairs = [pairs[i] for i in idx]

    lengths: dict[str, list[int]] = {s: [] for s in SENTIMENTS}
    above = {m: 0 for m in measures}
    n_negative = 0
    failures = 0
    for pair in pairs:
        text = pair.critique
        try:
            sentiment = sentiment_scorer(text)
            if sentiment not in SENTIMENTS:
                raise ValueError(f"bad sentiment label {sentiment!r}")
            scores = None
            if sentiment == "negative":
                raw = toxicity_scorer(text)
                scores = {m: float(raw[m]) for m in measures}
                if not all(0.0 <= v <= 1.0 and not math.isnan(v) for v in scores.values()):
                    raise ValueError("toxicity score outside [0, 1]")
        except Exception:
            failures += 1
            continue
        lengths[sentiment].append(len(text.split()))
        if scores is not None:
            n_negative += 1
            for m, v in scores.items():
                above[m] += v > threshold

    n_scored = sum(len(v) for v in lengths.values())
    return {
        "n_pairs": len(pairs),
        "n_scored": n_scored,
        "scorer_failures": failures,
        "positive_fraction": len(lengths["positive"]) / n_scored if n_scored else None,
        "lengths": {s: length_summary(lengths[s]) for s in SENTIMENTS},
        "toxicity": {
            "threshold": threshold,
            "n_negative": n_negative,
            "frequency": {m: (above[m] / n_negative if n_negative else None) for m in measures},
        },
    }
