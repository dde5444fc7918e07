"""JSONL records and the mask -> anonymise -> filter pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from carp.errors import DataError
from carp.pipeline.anonymize import DEFAULT_NAME_POOL, EntityRecognizer, anonymize_pair, get_recognizer
from carp.pipeline.masking import DEFAULT_THRESHOLD, mask_quotes_counted

MIN_CHARS = 8
MAX_LOGGED_ERRORS = 50


@dataclass(frozen=True)
class RawRecord:
    passage: str
    critique: str
    critique_type: str | None = None
    word_count: int | None = None

    @classmethod
    def from_json(cls, obj) -> RawRecord:
        if not isinstance(obj, dict):
            raise DataError("record is not a JSON object")
        passage, critique = obj.get("passage"), obj.get("critique")
        if not isinstance(passage, str) or not isinstance(critique, str):
            raise DataError("record needs string 'passage' and 'critique' fields")
        ctype, wc = obj.get("critique_type"), obj.get("word_count")
        if ctype is not None and not isinstance(ctype, str):
            raise DataError("'critique_type' must be a string")
        if wc is not None and (isinstance(wc, bool) or not isinstance(wc, int) or wc < 0):
            raise DataError("'word_count' must be a non-negative integer")
        return cls(passage, critique, ctype, wc)


@dataclass(frozen=True)
class PassageCritiquePair:
    passage: str
    critique: str
    critique_type: str | None = None
    word_count: int | None = None
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> PassageCritiquePair:
        raw = RawRecord.from_json(obj)
        return cls(raw.passage, raw.critique, raw.critique_type, raw.word_count, obj.get("provenance") or {})


@dataclass
class PipelineConfig:
    threshold: int = DEFAULT_THRESHOLD
    strict: bool = False
    recognizer: str = "heuristic"
    name_pool: Sequence[str] = DEFAULT_NAME_POOL
    min_chars: int = MIN_CHARS


def short_field(passage: str, critique: str, min_chars: int = MIN_CHARS) -> str | None:
    """Name of the first field shorter than ``min_chars`` (whitespace-trimmed), else None."""
    if len(passage.strip()) < min_chars:
        return "passage"
    if len(critique.strip()) < min_chars:
        return "critique"
    return None


def filter_short(pair: PassageCritiquePair, min_chars: int = MIN_CHARS) -> bool:
    """True to keep the pair; False if either side has fewer than ``min_chars`` characters."""
    return short_field(pair.passage, pair.critique, min_chars) is None


@dataclass
class PipelineReport:
    records_in: int = 0
    records_out: int = 0
    dropped: dict[str, int] = field(default_factory=lambda: {"short_passage": 0, "short_critique": 0, "malformed": 0})
    quotes_masked: int = 0
    entities_replaced: int = 0
    errors: list[str] = field(default_factory=list)

    @property
    def dropped_total(self) -> int:
        return sum(self.dropped.values())

    @property
    def dropped_short_pct(self) -> float:
        if not self.records_in:
            return 0.0
        return 100.0 * (self.dropped["short_passage"] + self.dropped["short_critique"]) / self.records_in

    def merge(self, other: PipelineReport) -> PipelineReport:
        merged = PipelineReport(
            self.records_in + other.records_in,
            self.records_out + other.records_out,
            {k: self.dropped.get(k, 0) + other.dropped.get(k, 0) for k in {**self.dropped, **other.dropped}},
            self.quotes_masked + other.quotes_masked,
            self.entities_replaced + other.entities_replaced,
            (self.errors + other.errors)[:MAX_LOGGED_ERRORS],
        )
        return merged

    def to_json(self) -> dict:
        return {
            "records_in": self.records_in,
            "records_out": self.records_out,
            "dropped": dict(sorted(self.dropped.items())),
            "dropped_total": self.dropped_total,
            "dropped_short_pct": round(self.dropped_short_pct, 4),
            "quotes_masked": self.quotes_masked,
            "entities_replaced": self.entities_replaced,
            "errors": self.errors,
        }


def process_record(
    raw: RawRecord, config: PipelineConfig, recognizer: EntityRecognizer
) -> tuple[PassageCritiquePair | None, str | None]:
    """Run one record through the passes; returns ``(pair, None)`` or ``(None, drop_reason)``."""
    critique, n_quotes = mask_quotes_counted(raw.passage, raw.critique, config.threshold)
    passage, critique, n_entities = anonymize_pair(raw.passage, critique, recognizer, config.name_pool)
    pair = PassageCritiquePair(
        passage, critique, raw.critique_type, raw.word_count,
        {"quotes_masked": n_quotes, "entities": n_entities},
    )
    short = short_field(pair.passage, pair.critique, config.min_chars)
    if short is not None:
        return None, f"short_{short}"
    return pair, None


def iter_pipeline(
    lines: Iterable[str],
    report: PipelineReport,
    config: PipelineConfig | None = None,
    recognizer: EntityRecognizer | None = None,
) -> Iterator[PassageCritiquePair]:
    """Yield kept pairs from JSONL ``lines`` in input order, updating ``report`` in place."""
    config = config or PipelineConfig()
    recognizer = recognizer or get_recognizer(config.recognizer)
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        report.records_in += 1
        try:
            raw = RawRecord.from_json(json.loads(line))
        except (json.JSONDecodeError, DataError) as exc:
            if config.strict:
                raise DataError(f"line {lineno}: {exc}") from exc
            report.dropped["malformed"] += 1
            if len(report.errors) < MAX_LOGGED_ERRORS:
                report.errors.append(f"line {lineno}: {exc}")
            continue
        pair, reason = process_record(raw, config, recognizer)
        if pair is None:
            report.dropped[reason] += 1
            continue
        report.records_out += 1
        report.quotes_masked += pair.provenance["quotes_masked"]
        report.entities_replaced += pair.provenance["entities"]
        yield pair


def run_pipeline(
    lines: Iterable[str], config: PipelineConfig | None = None, recognizer: EntityRecognizer | None = None
) -> tuple[list[PassageCritiquePair], PipelineReport]:
    report = PipelineReport()
    pairs = list(iter_pipeline(lines, report, config, recognizer))
    return pairs, report


def preprocess_file(
    in_path: str | Path, out_path: str | Path, config: PipelineConfig | None = None,
    recognizer: EntityRecognizer | None = None,
) -> PipelineReport:
    """Stream ``in_path`` through the pipeline into ``out_path`` (both UTF-8 JSONL)."""
    report = PipelineReport()
    with open(in_path, encoding="utf-8") as fin, open(out_path, "w", encoding="utf-8") as fout:
        for pair in iter_pipeline(fin, report, config, recognizer):
            fout.write(json.dumps(pair.to_json(), ensure_ascii=False) + "\n")
    return report


def read_pairs(path: str | Path) -> list[PassageCritiquePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                pairs.append(PassageCritiquePair.from_json(json.loads(line)))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return pairs


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
