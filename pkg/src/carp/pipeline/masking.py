"""Replace verbatim passage quotations inside critiques with ``[quote]``.

Matching runs on normalised words (lowercased, punctuation stripped); the
replacement is applied to the original character span so surrounding
punctuation and casing survive::

    >>> mask_quotes("the quick brown fox jumps high", "I love 'the quick brown fox' bit")
    "I love '[quote]' bit"
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from difflib import SequenceMatcher

QUOTE = "[quote]"
DEFAULT_THRESHOLD = 4

_TOKEN_RE = re.compile(r"\[quote\]|(?:(?!\[quote\])\S)+", re.IGNORECASE)
_NON_WORD_RE = re.compile(r"[\W_]+")
_CORE_RE = re.compile(r"[^\W_](?:.*[^\W_])?", re.DOTALL)
_COLLAPSE_RE = re.compile(r"\[quote\](?:\s*\[quote\])+", re.IGNORECASE)


@dataclass(frozen=True)
class Word:
    norm: str
    start: int
    end: int


def normalize_word(token: str) -> str:
    return _NON_WORD_RE.sub("", token.lower())


def split_words(text: str) -> list[Word]:
    """Whitespace tokens with non-empty normalised form, spans trimmed to word characters.

    Existing ``[quote]`` markers become sentinels that never equal a real word.
    """
    words = []
    for m in _TOKEN_RE.finditer(text):
        tok = m.group()
        if tok.lower() == QUOTE:
            words.append(Word(f"\x00{m.start()}", m.start(), m.end()))
            continue
        norm = normalize_word(tok)
        if not norm:
            continue
        core = _CORE_RE.search(tok)
        words.append(Word(norm, m.start() + core.start(), m.start() + core.end()))
    return words


def longest_common_run(a: list[str], b: list[str]) -> tuple[int, int, int]:
    """``(i, j, k)`` with ``a[i:i+k] == b[j:j+k]`` maximal; leftmost in ``a`` on ties."""
    match = SequenceMatcher(None, a, b, autojunk=False).find_longest_match(0, len(a), 0, len(b))
    return match.a, match.b, match.size


def mask_quotes_counted(passage: str, critique: str, threshold: int = DEFAULT_THRESHOLD) -> tuple[str, int]:
    """Like :func:`mask_quotes`, also returning how many spans were replaced."""
    if threshold < 2:
        raise ValueError("threshold must be at least 2")
    passage_words = [w.norm for w in split_words(passage)]
    replaced = 0
    while True:
        words = split_words(critique)
        norms = [w.norm for w in words]
        i, _, k = longest_common_run(norms, passage_words)
        if k < threshold:
            break
        phrase = norms[i : i + k]
        spans = []
        pos = 0
        while pos + k <= len(norms):
            if norms[pos : pos + k] == phrase:
                spans.append((words[pos].start, words[pos + k - 1].end))
                pos += k
            else:
                pos += 1
        for start, end in reversed(spans):
            critique = critique[:start] + QUOTE + critique[end:]
        replaced += len(spans)
    return _COLLAPSE_RE.sub(QUOTE, critique), replaced


def mask_quotes(passage: str, critique: str, threshold: int = DEFAULT_THRESHOLD) -> str:
    """Mask every run of ``threshold`` or more words the critique shares with the passage.

    The longest shared run is masked first (leftmost in the critique on
    ties), together with its repeats, until no qualifying run remains.
    Adjacent markers collapse into one.
    """
    return mask_quotes_counted(passage, critique, threshold)[0]
