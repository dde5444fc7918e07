"""``carp`` command line: preprocessing, training, zero-shot scoring and evaluation.

Every subcommand merges built-in defaults, an optional JSON ``--config``
file and explicit flags (in that order of precedence, flags last), then
writes the merged result as ``<subcommand>.effective_config.json`` next to
its outputs. All randomness derives from the single ``seed`` value.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from carp import evalharness, zeroshot
from carp.errors import CarpError, DataError, NumericError
from carp.model import CarpModel, ModelConfig
from carp.pipeline import PipelineConfig, corpus_stats, preprocess_file, read_pairs
from carp.pipeline.anonymize import RECOGNIZERS
from carp.synthetic import SyntheticCorpus
from carp.tokenizer import Vocabulary, build_vocab, encode_batch
from carp.training import TrainConfig, TrainState, fit, validate_groups

log = logging.getLogger("carp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS: dict = {
    "seed": 0,
    "pipeline": {"threshold": 4, "strict": False, "recognizer": "heuristic", "min_chars": 8},
    "stats": {"toxicity_threshold": 0.01, "sample_size": None},
    "vocab": {"max_size": 8000},
    "model": {
        "context_length": 64, "layers": 2, "model_dim": 64, "heads": 4,
        "encoding_dim": 2048, "feedforward_dim": 256,
    },
    "training": {
        "batch_size": 32, "chunk_size": 8, "learning_rate": 1e-3, "betas": [0.9, 0.999], "eps": 1e-8,
        "weight_decay": 0.0, "steps": 500, "validation_interval": 50, "strict": False, "holdout": 256,
    },
    "eval": {"random_dim": 64},
}

# flag dest -> (config section, key); a section of None means top level
FLAG_KEYS = {
    "seed": (None, "seed"),
    "threshold": ("pipeline", "threshold"),
    "strict": ("pipeline", "strict"),
    "recognizer": ("pipeline", "recognizer"),
    "min_chars": ("pipeline", "min_chars"),
    "toxicity_threshold": ("stats", "toxicity_threshold"),
    "sample_size": ("stats", "sample_size"),
    "max_size": ("vocab", "max_size"),
    "context_length": ("model", "context_length"),
    "layers": ("model", "layers"),
    "model_dim": ("model", "model_dim"),
    "heads": ("model", "heads"),
    "encoding_dim": ("model", "encoding_dim"),
    "feedforward_dim": ("model", "feedforward_dim"),
    "batch_size": ("training", "batch_size"),
    "chunk_size": ("training", "chunk_size"),
    "learning_rate": ("training", "learning_rate"),
    "betas": ("training", "betas"),
    "eps": ("training", "eps"),
    "weight_decay": ("training", "weight_decay"),
    "steps": ("training", "steps"),
    "validation_interval": ("training", "validation_interval"),
    "train_strict": ("training", "strict"),
    "holdout": ("training", "holdout"),
    "random_dim": ("eval", "random_dim"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage, which would collide with the data-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# configuration -------------------------------------------------------------------


def load_config(path: str | Path | None) -> dict:
    """Defaults overlaid with the JSON file at ``path``; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DataError(f"{path}: config must be a JSON object")
    for key, value in data.items():
        if key not in cfg:
            raise UsageError(f"{path}: unknown config key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"{path}: section {key!r} must be an object")
            unknown = set(value) - set(cfg[key])
            if unknown:
                raise UsageError(f"{path}: unknown keys in {key!r}: {sorted(unknown)}")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def effective_config(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config)
    for dest, (section, key) in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = list(value)
        if section is None:
            cfg[key] = value
        else:
            cfg[section][key] = value
    cfg["command"] = args.command
    cfg["paths"] = {k: v for k, v in sorted(vars(args).items()) if k in _PATH_ARGS and v is not None}
    return cfg


_PATH_ARGS = {"input", "output", "out_dir", "pairs", "vocab", "checkpoint", "story", "specs", "reviews",
              "stories", "votes", "external", "preset", "random_baseline", "group_size", "n_pairs",
              "n_stories", "n_voters"}


def dump_json(obj, path: str | Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def echo_config(cfg: dict, directory: str | Path) -> None:
    dump_json(cfg, Path(directory) / f"{cfg['command']}.effective_config.json")


def _out_dir_of(path: str | None) -> Path | None:
    return None if path is None else Path(path).resolve().parent


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, seed=int(cfg["seed"]), **cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["training"].items() if k != "holdout"}
    return TrainConfig(seed=int(cfg["seed"]), **t)


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_model(path: str) -> CarpModel:
    model = CarpModel.load(path)
    if model.vocab is None:
        raise DataError(f"{path}: checkpoint has no vocabulary")
    return model


def _specs(args) -> list[zeroshot.ClassifierSpec]:
    if args.specs is not None:
        return zeroshot.load_specs(args.specs)
    return zeroshot.load_preset(args.preset or "nine-reviews")


# subcommands ---------------------------------------------------------------------


def cmd_preprocess(args, cfg) -> None:
    p = cfg["pipeline"]
    config = PipelineConfig(threshold=p["threshold"], strict=p["strict"], recognizer=p["recognizer"],
                            min_chars=p["min_chars"])
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    try:
        report = preprocess_file(args.input, args.output, config)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    report_path = args.report or str(Path(args.output).with_suffix(".report.json"))
    dump_json(report.to_json(), report_path)
    echo_config(cfg, _out_dir_of(args.output))
    log.info("kept %d of %d records", report.records_out, report.records_in)


def cmd_stats(args, cfg) -> None:
    s = cfg["stats"]
    result = corpus_stats(read_pairs(args.input), threshold=s["toxicity_threshold"],
                          sample_size=s["sample_size"], seed=int(cfg["seed"]))
    dump_json(result, args.output)
    if args.output:
        echo_config(cfg, _out_dir_of(args.output))


def cmd_build_vocab(args, cfg) -> None:
    pairs = read_pairs(args.input)
    vocab = build_vocab([t for p in pairs for t in (p.passage, p.critique)], cfg["vocab"]["max_size"])
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(args.output)
    echo_config(cfg, _out_dir_of(args.output))


def split_holdout(n: int, holdout: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded ``(train_idx, holdout_idx)`` split, each sorted in corpus order."""
    if holdout < 0 or (holdout and not 2 <= holdout < n):
        raise UsageError(f"holdout must be 0 or in [2, {n - 1}], got {holdout}")
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[holdout:]), np.sort(order[:holdout])


def cmd_train(args, cfg) -> None:
    pairs = read_pairs(args.pairs)
    seed = int(cfg["seed"])
    train_idx, hold_idx = split_holdout(len(pairs), int(cfg["training"]["holdout"]), seed)
    train = [pairs[i] for i in train_idx]
    if args.vocab is not None:
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = build_vocab([t for p in train for t in (p.passage, p.critique)], cfg["vocab"]["max_size"])
    tcfg = train_config(cfg)
    model = CarpModel(model_config(cfg, len(vocab)), vocab)
    T = model.config.context_length

    def encode(subset):
        return encode_batch([p.passage for p in subset], vocab, T), encode_batch([p.critique for p in subset], vocab, T)

    passages, critiques = encode(train)
    holdout = encode([pairs[i] for i in hold_idx]) if len(hold_idx) else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    state = TrainState.create(model, tcfg)
    rows = fit(state, passages, critiques, tcfg, holdout, out / "train_log.jsonl", out / "checkpoints")
    model.save(out / "checkpoint")
    dump_json({
        "steps": state.step,
        "n_train": len(train),
        "n_holdout": len(hold_idx),
        "parameters": model.num_parameters(),
        "final": rows[-1] if rows else None,
    }, out / "train_summary.json")


def cmd_validate(args, cfg) -> None:
    model = _load_model(args.checkpoint)
    pairs = read_pairs(args.pairs)
    T = model.config.context_length
    P = encode_batch([p.passage for p in pairs], model.vocab, T)
    C = encode_batch([p.critique for p in pairs], model.vocab, T)
    group = args.group_size or len(pairs)
    loss, acc = validate_groups(model, P, C, group)
    dump_json({"n_pairs": len(pairs), "group_size": group, "val_loss": loss, "val_accuracy": acc}, args.output)
    if args.output:
        echo_config(cfg, _out_dir_of(args.output))


def cmd_classify(args, cfg) -> None:
    model = _load_model(args.checkpoint)
    dist = zeroshot.classify(model, _read_text(args.story), _specs(args))
    dump_json(dist.to_json(), args.output)
    if args.output:
        echo_config(cfg, _out_dir_of(args.output))


def _read_reviews(path: str) -> list[str]:
    text = _read_text(path)
    if path.endswith(".json"):
        try:
            reviews = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: {exc}") from exc
        if not isinstance(reviews, list) or not all(isinstance(r, str) for r in reviews):
            raise DataError(f"{path}: expected a JSON list of strings")
        return reviews
    return [line.strip() for line in text.splitlines() if line.strip()]


def cmd_rank(args, cfg) -> None:
    model = _load_model(args.checkpoint)
    ranked = zeroshot.rank_reviews(model, _read_text(args.story), _read_reviews(args.reviews))
    dump_json([{"review": r, "cosine": c} for r, c in ranked], args.output)
    if args.output:
        echo_config(cfg, _out_dir_of(args.output))


def _parse_external(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--external expects NAME=PATH, got {item!r}")
        out[name] = path
    return out


def cmd_evaluate(args, cfg) -> None:
    methods: dict = {}
    if args.checkpoint:
        methods["carp"] = _load_model(args.checkpoint)
    if args.random_baseline:
        methods["random"] = evalharness.RandomEmbeddingScorer(cfg["eval"]["random_dim"], int(cfg["seed"]))
    for name, path in _parse_external(args.external or []).items():
        if name in methods:
            raise UsageError(f"duplicate method name {name!r}")
        methods[name] = evalharness.ExternalScores.load(path)
    if not methods:
        raise UsageError("nothing to evaluate: give --checkpoint, --random-baseline and/or --external")
    reports = evalharness.compare_methods(
        methods, evalharness.load_stories(args.stories), evalharness.load_votes(args.votes), _specs(args)
    )
    evalharness.write_report(reports, args.out_dir)
    echo_config(cfg, args.out_dir)


def cmd_synth(args, cfg) -> None:
    seed = int(cfg["seed"])
    corpus = SyntheticCorpus(seed=seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "raw.jsonl", "w", encoding="utf-8") as fh:
        for row in corpus.pairs(args.n_pairs):
            fh.write(json.dumps(row) + "\n")
    ev = corpus.eval_set(args.n_stories, args.n_voters)
    for key in ("stories", "votes", "specs", "external_scores"):
        dump_json(ev[key], out / f"{key}.json")
    (out / "story.txt").write_text(ev["stories"][0]["text"] + "\n", encoding="utf-8")
    echo_config(cfg, out)


# parser --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (sections: seed, pipeline, stats, vocab, model, training, eval)")
    p.add_argument("--seed", type=int, help="global seed for every random choice")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--context-length", type=int, help="token context length T")
    g.add_argument("--layers", type=int, help="transformer blocks per tower")
    g.add_argument("--model-dim", type=int, help="hidden width d")
    g.add_argument("--heads", type=int, help="attention heads")
    g.add_argument("--encoding-dim", type=int, help="projection width D")
    g.add_argument("--feedforward-dim", type=int, help="feed-forward hidden width")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int, help="contrastive batch size n")
    g.add_argument("--chunk-size", type=int, help="gradient-cache chunk size c (must divide n)")
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, help="optimizer step size")
    g.add_argument("--betas", type=float, nargs=2, metavar=("B1", "B2"), help="moment decay rates")
    g.add_argument("--eps", type=float, help="optimizer epsilon")
    g.add_argument("--weight-decay", type=float, help="decoupled weight decay")
    g.add_argument("--steps", type=int, help="optimizer steps")
    g.add_argument("--validation-interval", type=int, help="steps between log rows and checkpoints")
    g.add_argument("--holdout", type=int, help="pairs held out for validation (0 disables)")
    g.add_argument("--strict", dest="train_strict", action="store_true", default=None,
                   help="fail instead of starting a new epoch when the data runs out")


def _classifier_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=sorted(zeroshot.PRESETS), help="built-in classifier set (default nine-reviews)")
    g.add_argument("--specs", help="JSON list of {label, variants}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="carp", description="Contrastive passage/critique models: data, training, scoring.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("preprocess", help="mask quotes, anonymise names and drop short pairs")
    p.add_argument("--in", dest="input", required=True, help="raw JSONL records")
    p.add_argument("--out", dest="output", required=True, help="output JSONL pairs")
    p.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    p.add_argument("--threshold", type=int, help="minimum quoted run length in words")
    p.add_argument("--strict", action="store_true", default=None, help="fail on the first malformed record")
    p.add_argument("--recognizer", choices=sorted(RECOGNIZERS), help="named-entity recogniser")
    p.add_argument("--min-chars", type=int, help="drop pairs with a field shorter than this")
    _common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("stats", help="critique length, sentiment and toxicity statistics")
    p.add_argument("--in", dest="input", required=True, help="processed JSONL pairs")
    p.add_argument("--out", dest="output", help="output JSON (default: stdout)")
    p.add_argument("--toxicity-threshold", type=float, help="score above which a critique counts as toxic")
    p.add_argument("--sample-size", type=int, help="score a seeded random sample of this many pairs")
    _common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("build-vocab", help="build a token vocabulary from processed pairs")
    p.add_argument("--in", dest="input", required=True, help="processed JSONL pairs")
    p.add_argument("--out", dest="output", required=True, help="vocabulary JSON")
    p.add_argument("--max-size", type=int, help="vocabulary size including special tokens")
    _common(p)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a model with gradient-cached contrastive steps")
    p.add_argument("--pairs", required=True, help="processed JSONL pairs")
    p.add_argument("--out", dest="out_dir", required=True, help="run directory")
    p.add_argument("--vocab", help="vocabulary JSON (default: built from the training split)")
    p.add_argument("--max-size", type=int, help="vocabulary size when building one")
    _model_flags(p)
    _train_flags(p)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("validate", help="contrastive loss and retrieval accuracy on pairs")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--pairs", required=True, help="processed JSONL pairs")
    p.add_argument("--group-size", type=int, help="candidates per retrieval group V (default: all pairs)")
    p.add_argument("--out", dest="output", help="output JSON (default: stdout)")
    _common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("classify", help="zero-shot label distribution for a story")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--story", required=True, help="story text file")
    _classifier_flags(p)
    p.add_argument("--out", dest="output", help="output JSON (default: stdout)")
    _common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("rank", help="rank candidate reviews for a story")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--story", required=True, help="story text file")
    p.add_argument("--reviews", required=True, help="one review per line, or a .json list of strings")
    p.add_argument("--out", dest="output", help="output JSON (default: stdout)")
    _common(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("evaluate", help="compare methods against human votes")
    p.add_argument("--stories", required=True, help="JSON list of {story_id, text}")
    p.add_argument("--votes", required=True, help="JSON list of {story_id, labels, counts}")
    _classifier_flags(p)
    p.add_argument("--checkpoint", help="trained model checkpoint, reported as method 'carp'")
    p.add_argument("--external", action="append", metavar="NAME=PATH",
                   help="external raw-score file (JSON list of {story_id, raw_scores}); repeatable")
    p.add_argument("--random-baseline", action="store_true", default=None,
                   help="include the random-embedding baseline as method 'random'")
    p.add_argument("--random-dim", type=int, help="random baseline vector width")
    p.add_argument("--out", dest="out_dir", required=True, help="report directory")
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a seeded synthetic corpus and evaluation set")
    p.add_argument("--out", dest="out_dir", required=True, help="output directory")
    p.add_argument("--pairs", dest="n_pairs", type=int, default=2000, help="raw pairs to generate")
    p.add_argument("--stories", dest="n_stories", type=int, default=7, help="evaluation stories")
    p.add_argument("--voters", dest="n_voters", type=int, default=30, help="simulated voters per story")
    _common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        args.func(args, cfg)
    except NumericError as exc:
        print(f"carp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CarpError, OSError) as exc:
        print(f"carp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ValueError, TypeError) as exc:
        print(f"carp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
