"""Word-level tokenizer with fixed-length padded batches."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from carp.errors import DataError, DegenerateInputError

PAD, UNK, QUOTE, BOS, EOS = range(5)
SPECIAL_TOKENS = ("[pad]", "[unk]", "[quote]", "[bos]", "[eos]")
QUOTE_TOKEN = "[quote]"
DEFAULT_CONTEXT = 64

_TOKEN_RE = re.compile(r"\[quote\]|\w+|[^\w\s]", re.IGNORECASE)


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it into words and single punctuation marks.

    A literal ``[quote]`` (any casing) survives as one token.
    """
    return [tok.lower() for tok in _TOKEN_RE.findall(text)]


class Vocabulary:
    """Immutable token <-> id mapping; ids 0..4 are the reserved specials."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the reserved special tokens")
        self._id_to_token = tuple(tokens)
        self._token_to_id = {tok: i for i, tok in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._id_to_token == other._id_to_token

    def token_id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._id_to_token[idx]

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._id_to_token

    def to_json(self) -> dict[str, int]:
        return dict(self._token_to_id)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=0) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, mapping: dict[str, int]) -> Vocabulary:
        ordered = sorted(mapping.items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(len(ordered))):
            raise DataError("vocabulary ids must be contiguous from 0")
        return cls([tok for tok, _ in ordered])

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Most frequent corpus tokens (ties lexicographic) after the specials.

    ``max_size`` counts the five special tokens.
    """
    if max_size < len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must be at least {len(SPECIAL_TOKENS)}")
    counts: Counter[str] = Counter()
    seen_text = False
    for text in corpus:
        seen_text = True
        counts.update(tok for tok in tokenize(text) if tok not in SPECIAL_TOKENS)
    if not seen_text or not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = max_size - len(SPECIAL_TOKENS)
    return Vocabulary(list(SPECIAL_TOKENS) + [tok for tok, _ in ranked[:keep]])


@dataclass(frozen=True)
class TokenBatch:
    """``ids`` and 0/1 ``mask``, both of shape (batch, context_length)."""

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.ids.ndim != 2 or self.ids.shape != self.mask.shape:
            raise ValueError("ids and mask must be matching 2-d arrays")

    @property
    def context_length(self) -> int:
        return self.ids.shape[1]

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __getitem__(self, rows) -> TokenBatch:
        if isinstance(rows, int):
            rows = slice(rows, rows + 1)
        return TokenBatch(self.ids[rows], self.mask[rows])

    @classmethod
    def concatenate(cls, batches: Sequence[TokenBatch]) -> TokenBatch:
        return cls(np.concatenate([b.ids for b in batches]), np.concatenate([b.mask for b in batches]))


def encode(text: str, vocab: Vocabulary, context_length: int = DEFAULT_CONTEXT) -> TokenBatch:
    """Encode one text, tail-truncated or tail-padded to ``context_length``."""
    if context_length < 2:
        raise ValueError("context_length must be at least 2")
    tokens = tokenize(text)
    if not tokens:
        raise DegenerateInputError(f"text has no tokens: {text!r}")
    kept = [vocab.token_id(tok) for tok in tokens[:context_length]]
    ids = np.full((1, context_length), PAD, dtype=np.int64)
    mask = np.zeros((1, context_length), dtype=np.int64)
    ids[0, : len(kept)] = kept
    mask[0, : len(kept)] = 1
    return TokenBatch(ids, mask)


def encode_batch(texts: Sequence[str], vocab: Vocabulary, context_length: int = DEFAULT_CONTEXT) -> TokenBatch:
    if not texts:
        raise DegenerateInputError("no texts to encode")
    return TokenBatch.concatenate([encode(t, vocab, context_length) for t in texts])


def decode(batch: TokenBatch, vocab: Vocabulary) -> list[list[str]]:
    return [
        [vocab.token(int(i)) for i, m in zip(row_ids, row_mask) if m]
        for row_ids, row_mask in zip(batch.ids, batch.mask)
    ]
