"""Proper-noun replacement with indexed generic names (``John0``, ``Sam1``, ...)."""

from __future__ import annotations

import re
from typing import Hashable, Protocol, Sequence

from carp.errors import DataError

DEFAULT_NAME_POOL = ("John", "Sam", "Alex", "Taylor", "Jordan")

COMMON_FIRST_NAMES = frozenset(
    """
    Aaron Abigail Adam Alan Albert Alex Alexander Alice Amanda Amelia Amy Andrew Angela Anna Anne Anthony
    Arthur Ashley Ava Barbara Ben Benjamin Beth Betty Bill Bob Brandon Brian Bruce Carl Carol Caroline
    Charles Charlie Charlotte Chloe Chris Christopher Claire Daniel David Dennis Diana Donald Dorothy Dylan
    Edward Eleanor Elizabeth Ella Ellen Emily Emma Eric Ethan Frank Fred George Grace Hannah Harry Helen
    Henry Isaac Isabella Jack Jacob Jake James Jane Janet Jason Jennifer Jessica Jim John Jonathan Joseph
    Joshua Julia Justin Karen Kate Katherine Kevin Kyle Laura Leo Liam Lily Linda Lisa Lucas Lucy Luke
    Margaret Maria Mark Mary Matthew Max Megan Mia Michael Michelle Mike Noah Oliver Olivia Patrick Paul
    Peter Rachel Rebecca Richard Robert Ryan Sam Samuel Sarah Scott Sophia Sophie Stephen Steve Susan Thomas
    Tim Timothy Tom Tyler Victoria William Zoe
    """.split()
)

# capitalised words that are not names even mid-sentence
_NOT_ENTITIES = frozenset(
    """
    I Im Ive Id Ill Mr Mrs Ms Dr Monday Tuesday Wednesday Thursday Friday Saturday Sunday
    January February March April May June July August September October November December
    """.split()
)

_CAP_RE = re.compile(r"\b[A-Z][a-z]+\b")
_SENTENCE_END = set(".!?\"'“”‘’([{:;\n-")

Span = tuple[int, int, Hashable]


class EntityRecognizer(Protocol):
    """Returns non-overlapping ``(start, end, cluster_id)`` spans for ``text``.

    Spans with equal ``cluster_id`` refer to the same entity; ids must be
    comparable across texts of one record (passage and critique).
    """

    def __call__(self, text: str) -> list[Span]: ...


def _sentence_initial(text: str, start: int) -> bool:
    j = start - 1
    while j >= 0 and text[j] in " \t":
        j -= 1
    return j < 0 or text[j] in _SENTENCE_END


class HeuristicRecognizer:
    """Capitalised tokens that are known first names, or that appear mid-sentence.

    Runs of adjacent entity tokens separated by one space form a single span
    (``Jane Smith``); clusters merge on exact string.
    """

    def __init__(self, names: frozenset[str] = COMMON_FIRST_NAMES, mid_sentence: bool = True):
        self.names = names
        self.mid_sentence = mid_sentence

    def _is_entity(self, text: str, m: re.Match) -> bool:
        word = m.group()
        if word in self.names:
            return True
        if not self.mid_sentence or word in _NOT_ENTITIES:
            return False
        return not _sentence_initial(text, m.start())

    def __call__(self, text: str) -> list[Span]:
        spans: list[list[int]] = []
        for m in _CAP_RE.finditer(text):
            if not self._is_entity(text, m):
                continue
            if spans and text[spans[-1][1] : m.start()] == " ":
                spans[-1][1] = m.end()
            else:
                spans.append([m.start(), m.end()])
        return [(s, e, text[s:e]) for s, e in spans]


class DictionaryRecognizer(HeuristicRecognizer):
    """Only names from the first-name dictionary."""

    def __init__(self, names: frozenset[str] = COMMON_FIRST_NAMES):
        super().__init__(names, mid_sentence=False)


class NullRecognizer:
    def __call__(self, text: str) -> list[Span]:
        return []


RECOGNIZERS = {
    "heuristic": HeuristicRecognizer,
    "dictionary": DictionaryRecognizer,
    "none": NullRecognizer,
}


def get_recognizer(name: str) -> EntityRecognizer:
    try:
        return RECOGNIZERS[name]()
    except KeyError:
        raise ValueError(f"unknown recognizer {name!r}; choose from {sorted(RECOGNIZERS)}") from None


def _validated(text: str, spans: list[Span]) -> list[Span]:
    spans = sorted(spans, key=lambda s: (s[0], s[1]))
    prev_end = 0
    for start, end, _ in spans:
        if not 0 <= start < end <= len(text):
            raise DataError(f"entity span ({start}, {end}) out of bounds")
        if start < prev_end:
            raise DataError(f"overlapping entity spans at offset {start}")
        prev_end = end
    return spans


def anonymize(
    text: str,
    recognizer: EntityRecognizer,
    name_pool: Sequence[str] = DEFAULT_NAME_POOL,
    clusters: dict[Hashable, int] | None = None,
) -> str:
    """Replace entity spans with ``name_pool[k % len(pool)] + str(k)``.

    ``k`` is the cluster's first-appearance index. Pass the same ``clusters``
    dict for every text of a record so an entity gets one replacement.
    """
    if not name_pool:
        raise ValueError("name_pool must not be empty")
    if clusters is None:
        clusters = {}
    spans = _validated(text, recognizer(text))
    for _, _, cid in spans:
        clusters.setdefault(cid, len(clusters))
    for start, end, cid in reversed(spans):
        k = clusters[cid]
        text = text[:start] + f"{name_pool[k % len(name_pool)]}{k}" + text[end:]
    return text


def anonymize_pair(
    passage: str, critique: str, recognizer: EntityRecognizer, name_pool: Sequence[str] = DEFAULT_NAME_POOL
) -> tuple[str, str, int]:
    """Anonymise both sides with one cluster map; returns the entity count too."""
    clusters: dict[Hashable, int] = {}
    passage = anonymize(passage, recognizer, name_pool, clusters)
    critique = anonymize(critique, recognizer, name_pool, clusters)
    return passage, critique, len(clusters)
