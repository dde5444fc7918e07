"""Seeded synthetic story/critique corpora with a known alignment signal.

Passages are sentences over a pseudo-word lexicon. Every critique names
``critique_words`` content words taken from its own passage, so a model can only match
pairs by learning which words co-occur; some critiques also quote a run of
the passage verbatim (masked by the pipeline) and some passages mention a
character name (anonymised by the pipeline).

The evaluation set assigns each of nine topic reviews a disjoint set of
three content words. A story "is about" the one or two topics whose words
it contains, and simulated voters mostly pick those topics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()
_FILLERS = ("the", "a", "and", "with", "near", "was")
NAMES = ("Alice", "Bob", "Maria", "George", "Lucy")

CRITIQUE_TEMPLATES = (
    "i liked {} , but it felt off .",
    "the part with {} needs more detail .",
    "why does {} matter here ?",
    "more about {} please , it was vivid .",
)
REVIEW_TEMPLATES = (
    "the {0} , the {1} and the {2} stand out .",
    "this is all about the {0} and the {1} and the {2} .",
)


def make_lexicon(size: int, seed: int = 0) -> list[str]:
    """``size`` distinct pseudo-words of two or three consonant-vowel syllables."""
    rng = np.random.default_rng(seed)
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < size:
        n_syll = int(rng.integers(2, 4))
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(n_syll))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass
class SyntheticCorpus:
    lexicon_size: int = 50
    passage_words: tuple[int, int] = (4, 6)
    critique_words: int = 4
    quote_rate: float = 0.3
    name_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.critique_words <= self.passage_words[0] <= self.passage_words[1]:
            raise ValueError("need 1 <= critique_words <= min passage words <= max passage words")
        self.lexicon = make_lexicon(self.lexicon_size, self.seed)

    def _passage(self, rng: np.random.Generator, words: list[str]) -> tuple[str, str | None]:
        name = str(rng.choice(NAMES)) if rng.random() < self.name_rate else None
        sentences, i = [], 0
        while i < len(words):
            k = int(rng.integers(3, 6))
            chunk = words[i : i + k]
            i += k
            out = ["the", chunk[0]]
            for w in chunk[1:]:
                out += [str(rng.choice(_FILLERS)), w]
            sentences.append(" ".join(out))
        if name is not None:
            sentences.insert(int(rng.integers(0, len(sentences) + 1)), f"{name} saw it all")
        return " ".join(s[0].upper() + s[1:] + "." for s in sentences), name

    def _critique(self, rng: np.random.Generator, passage: str, words: list[str], name: str | None) -> str:
        picks = [f"the {words[i]}" for i in rng.choice(len(words), self.critique_words, replace=False)]
        listed = picks[0] if len(picks) == 1 else " , ".join(picks[:-1]) + " and " + picks[-1]
        text = str(rng.choice(CRITIQUE_TEMPLATES)).format(listed)
        if name is not None and rng.random() < 0.5:
            text = f"why is {name} here ? " + text
        if rng.random() < self.quote_rate:
            tokens = passage.split()
            n = int(rng.integers(4, 7))
            start = int(rng.integers(0, max(1, len(tokens) - n)))
            text += ' you wrote "' + " ".join(tokens[start : start + n]) + '" which reads well .'
        return text

    def pair(self, rng: np.random.Generator, words: list[str] | None = None) -> dict:
        if words is None:
            n = int(rng.integers(self.passage_words[0], self.passage_words[1] + 1))
            words = [self.lexicon[i] for i in rng.choice(len(self.lexicon), n, replace=False)]
        passage, name = self._passage(rng, words)
        critique = self._critique(rng, passage, words, name)
        return {"passage": passage, "critique": critique, "critique_type": "inline", "word_count": len(critique.split())}

    def pairs(self, n: int, seed: int | None = None) -> list[dict]:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return [self.pair(rng) for _ in range(n)]

    def eval_set(self, n_stories: int = 7, n_voters: int = 30, seed: int | None = None) -> dict:
        """Stories, simulated votes, topic review specs and a weak external baseline.

        Returns a dict with ``stories``, ``votes``, ``specs`` and
        ``external_scores`` lists in the harness file formats.
        """
        rng = np.random.default_rng((self.seed if seed is None else seed) + 1_000_003)
        topic_idx = rng.choice(len(self.lexicon), 27, replace=False)
        topics = [[self.lexicon[i] for i in topic_idx[3 * t : 3 * t + 3]] for t in range(9)]
        specs = [
            {"label": f"topic {t}: " + "/".join(ws), "variants": [tpl.format(*ws) for tpl in REVIEW_TEMPLATES]}
            for t, ws in enumerate(topics)
        ]
        labels = [s["label"] for s in specs]
        others = [w for i, w in enumerate(self.lexicon) if i not in set(topic_idx.tolist())]
        stories, votes, external = [], [], []
        for s in range(n_stories):
            sid = f"story-{s}"
            true = rng.choice(9, int(rng.integers(1, 3)), replace=False)
            filler = [others[i] for i in rng.choice(len(others), 2, replace=False)]
            words = filler + [w for t in true for w in topics[t]]
            words = [words[i] for i in rng.permutation(len(words))]
            text, _ = self._passage(rng, words)
            stories.append({"story_id": sid, "text": text})
            pick = np.where(np.isin(np.arange(9), true), 0.8, 0.1)
            counts = (rng.random((n_voters, 9)) < pick).sum(axis=0)
            votes.append({"story_id": sid, "labels": labels, "counts": [int(c) for c in counts]})
            overlap = np.array([sum(w in words for w in ws) for ws in topics], dtype=float)
            external.append({"story_id": sid, "raw_scores": (overlap + rng.normal(0, 1.5, 9)).round(6).tolist()})
        return {"stories": stories, "votes": votes, "specs": specs, "external_scores": external}
