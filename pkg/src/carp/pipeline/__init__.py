"""Story-critique preprocessing: quote masking, anonymisation, short-pair filtering, corpus stats."""

from carp.pipeline.anonymize import (
    DEFAULT_NAME_POOL,
    DictionaryRecognizer,
    EntityRecognizer,
    HeuristicRecognizer,
    NullRecognizer,
    anonymize,
    anonymize_pair,
    get_recognizer,
)
from carp.pipeline.masking import QUOTE, mask_quotes, mask_quotes_counted
from carp.pipeline.records import (
    MIN_CHARS,
    PassageCritiquePair,
    PipelineConfig,
    PipelineReport,
    RawRecord,
    filter_short,
    iter_pipeline,
    preprocess_file,
    read_pairs,
    run_pipeline,
)
from carp.pipeline.stats import corpus_stats, lexicon_sentiment, lexicon_toxicity

__all__ = [
    "DEFAULT_NAME_POOL",
    "DictionaryRecognizer",
    "EntityRecognizer",
    "HeuristicRecognizer",
    "MIN_CHARS",
    "NullRecognizer",
    "PassageCritiquePair",
    "PipelineConfig",
    "PipelineReport",
    "QUOTE",
    "RawRecord",
    "anonymize",
    "anonymize_pair",
    "corpus_stats",
    "filter_short",
    "get_recognizer",
    "iter_pipeline",
    "lexicon_sentiment",
    "lexicon_toxicity",
    "mask_quotes",
    "mask_quotes_counted",
    "preprocess_file",
    "read_pairs",
    "run_pipeline",
]
