"""End-to-end acceptance checks; a PASS/FAIL line per criterion is printed in the terminal summary."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from carp import numerics as nx
from carp.cli import main
from carp.evalharness import ExternalScores, HumanVotes, RandomEmbeddingScorer, compare, compare_methods
from carp.evalharness import human_distribution
from carp.model import LOG_SCALE_MAX, LOG_SCALE_MIN, CarpModel, ModelConfig
from carp.pipeline import mask_quotes, run_pipeline
from carp.synthetic import SyntheticCorpus
from carp.tokenizer import TokenBatch
from carp.training import (
    TrainConfig,
    TrainState,
    cached_gradients,
    contrastive_loss,
    full_batch_gradients,
    train_step_cached,
    train_step_full,
    validate,
    validate_groups,
)
from carp.zeroshot import ClassifierSpec, ScoreDistribution
from conftest import random_batch, toy_config

pytestmark = pytest.mark.usefixtures("criterion")


def grads(model):
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in model.parameters().items()}


# 1 --------------------------------------------------------------------------------


@pytest.mark.criterion(1, "gradient-cache equivalence over 20 seeds and c in {1,2,4,8,16}")
def test_gradient_cache_equivalence():
    start = time.perf_counter()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        P, C = random_batch(rng, 16, 16, 40), random_batch(rng, 16, 16, 40)
        # float64 so the comparison measures the algorithm rather than float32 summation order
        model = CarpModel(toy_config(seed=seed)).to_dtype(np.float64)
        full = full_batch_gradients(model, P, C)
        g_full = grads(model)
        for c in (1, 2, 4, 8, 16):
            cached = cached_gradients(model, P, C, c)
            assert abs(cached.loss - full.loss) <= 1e-5
            for name, g in grads(model).items():
                np.testing.assert_allclose(g, g_full[name], rtol=1e-4, atol=1e-6, err_msg=f"seed {seed} c {c} {name}")
        # the optimizer-step entry points report the same loss
        cfg = TrainConfig(batch_size=16, chunk_size=4)
        a = TrainState.create(CarpModel(toy_config(seed=seed)).to_dtype(np.float64), cfg)
        b = TrainState.create(CarpModel(toy_config(seed=seed)).to_dtype(np.float64), cfg)
        assert abs(train_step_full(a, P, C) - train_step_cached(b, P, C, 4)) <= 1e-5
    assert time.perf_counter() - start < 120


# 2 --------------------------------------------------------------------------------


def _t64(rng, shape):
    return nx.Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _op_cases(rng, shape):
    """One scalar-valued probe per differentiable op at a given (rows, cols) shape."""
    r, k = shape
    a, b = _t64(rng, shape), _t64(rng, shape)
    w = rng.normal(size=shape)
    m = _t64(rng, (k, 3))
    gain, bias = _t64(rng, k), _t64(rng, k)
    x3 = _t64(rng, (r, k, 3))
    mask = (rng.random((r, k)) < 0.6).astype(np.int64)
    mask[:, 0] = 1
    table, ids = _t64(rng, (7, k)), rng.integers(0, 7, size=r)
    sq = _t64(rng, (r, r))
    targets = rng.integers(0, r, size=r)
    return {
        "add": (lambda: ((a + b) * w).sum(), {"a": a, "b": b}),
        "sub": (lambda: ((a - b) * w).sum(), {"a": a, "b": b}),
        "mul": (lambda: (a * b * w).sum(), {"a": a, "b": b}),
        "exp": (lambda: (nx.exp(a * 0.5) * w).sum(), {"a": a}),
        "gelu": (lambda: (nx.gelu(a) * w).sum(), {"a": a}),
        "reshape": (lambda: (nx.reshape(a, (k, r)) * w.reshape(k, r)).sum(), {"a": a}),
        "transpose": (lambda: (nx.transpose(a, (1, 0)) * w.T).sum(), {"a": a}),
        "concat": (lambda: (nx.concat([a, b], axis=1) * np.hstack([w, -w])).sum(), {"a": a, "b": b}),
        "sum": (lambda: nx.tsum(a * w, axis=1).sum(), {"a": a}),
        "mean": (lambda: nx.mean(a * a, axis=0).sum(), {"a": a}),
        "matmul": (lambda: nx.gelu(a @ m).sum(), {"a": a, "m": m}),
        "embedding": (lambda: (nx.embedding(table, ids) * w).sum(), {"table": table}),
        "softmax": (lambda: (nx.softmax(a, axis=-1) * w).sum(), {"a": a}),
        "layer_norm": (lambda: (nx.layer_norm(a, gain, bias) * w).sum(), {"a": a, "gain": gain, "bias": bias}),
        "masked_sum": (lambda: (nx.masked_sum(x3, mask) * rng_fixed(r, 3)).sum(), {"x": x3}),
        "l2_normalize": (lambda: (nx.l2_normalize(a) * w).sum(), {"a": a}),
        "cross_entropy": (lambda: nx.cross_entropy_rows(sq, targets), {"z": sq}),
    }


def rng_fixed(*shape):
    return np.random.default_rng(99).normal(size=shape)


@pytest.mark.criterion(2, "finite-difference audit of every op and the full encoder")
def test_finite_difference_audit():
    start = time.perf_counter()
    shapes = [(2, 3), (3, 4), (1, 5), (4, 2), (3, 3)]
    failures, audited = [], {}
    for i, shape in enumerate(shapes):
        for op, (fn, params) in _op_cases(np.random.default_rng(i), shape).items():
            audited[op] = audited.get(op, 0) + 1
            for check in nx.check_gradients(fn, params, h=1e-6):
                if not check.ok(1e-6):
                    failures.append((op, shape, check.name, check.max_abs_error))
    for seed, (T, L) in enumerate([(4, 1), (5, 2), (3, 1), (6, 2), (4, 2)]):
        config = ModelConfig(vocab_size=9, context_length=T, layers=L, model_dim=8, heads=2, encoding_dim=5,
                             feedforward_dim=12, seed=seed)
        model = CarpModel(config).to_dtype(np.float64)
        rng = np.random.default_rng(seed)
        ids = rng.integers(5, 9, size=(2, T))
        mask = np.ones((2, T), int)
        mask[1, T // 2 :] = 0
        w = rng.normal(size=(2, 5))
        tower = model.critique_tower if seed % 2 else model.passage_tower
        audited["encoder"] = audited.get("encoder", 0) + 1
        for check in nx.check_gradients(lambda: (tower.forward(ids, mask) * w).sum(), tower.params, h=1e-6,
                                        max_entries=12, rng=rng):
            if not check.ok(1e-6):
                failures.append(("encoder", (T, L), check.name, check.max_abs_error))
    assert not failures, failures
    assert all(n >= 5 for n in audited.values())
    assert time.perf_counter() - start < 120


# 3 --------------------------------------------------------------------------------


@pytest.mark.criterion(3, "initial loss near ln(n) and V=256 accuracy near chance")
def test_initialization():
    rng = np.random.default_rng(0)
    model = CarpModel(ModelConfig(vocab_size=200, seed=0))
    for n in (4, 16, 64):
        P, C = random_batch(rng, n, 64, 200), random_batch(rng, n, 64, 200)
        with nx.no_grad():
            loss = contrastive_loss(model.logits(model.encode_passages(P), model.encode_critiques(C))).item()
        assert abs(loss - math.log(n)) <= 0.15 * math.log(n), (n, loss)
    # a single V=256 draw has about two expected hits, so the rate is averaged over independent inits
    accs = []
    for seed in range(8):
        model = CarpModel(ModelConfig(vocab_size=200, seed=seed))
        rng = np.random.default_rng(100 + seed)
        accs.append(validate(model, random_batch(rng, 256, 64, 200), random_batch(rng, 256, 64, 200))[1])
    chance = 1 / 256
    assert chance / 3 <= np.mean(accs) <= 3 * chance, accs


# 4 --------------------------------------------------------------------------------


@pytest.mark.criterion(4, "synthetic-corpus learnability (V=16 >= 0.9, V=64 >= 0.5)")
def test_learnability(learned):
    P, C = learned["holdout"]
    assert learned["n_pairs"] == 2000
    _, acc16 = validate_groups(learned["model"], P, C, 16)
    _, acc64 = validate_groups(learned["model"], P, C, 64)
    print(f"held-out accuracy V=16 {acc16:.3f}, V=64 {acc64:.3f}, trained in {learned['seconds']:.0f}s")
    assert acc16 >= 0.9 and acc64 >= 0.5
    assert learned["seconds"] < 600


# 5 --------------------------------------------------------------------------------


def _planted_pair(rng, k):
    """Passage of unique words; critique plants 1-3 quotes of 2-8 words among words absent from the passage."""
    passage = [f"p{k}w{i}" for i in range(40)]
    n_quotes = int(rng.integers(1, 4))
    lengths = rng.integers(2, 9, size=n_quotes)
    starts = rng.choice(40 - 8, n_quotes, replace=False)
    parts, expected, quotes = [], [], []
    for j, (s, length) in enumerate(zip(starts, lengths)):
        gap = [f"x{k}g{j}n{g}" for g in range(int(rng.integers(1, 4)))]
        if rng.random() < 0.5:  # a lone passage word among distractors is not a quote
            gap.insert(1, passage[int(rng.integers(0, 40))])
            gap.insert(2, f"x{k}g{j}tail")
        quote = passage[s : s + length]
        if rng.random() < 0.3:
            quote = [quote[0].upper(), *quote[1:]]
        wrap = rng.random() < 0.5
        text = " ".join(quote)
        masked = "[quote]" if length >= 4 else text
        parts += [*gap, f'"{text}"' if wrap else text]
        expected += [*gap, f'"{masked}"' if wrap else masked]
        quotes.append(length)
    parts.append(f"x{k}end")
    expected.append(f"x{k}end")
    return " ".join(passage), " ".join(parts), " ".join(expected), quotes


@pytest.mark.criterion(5, "quote masking on 1000 planted-quote pairs, checked by brute-force oracle")
def test_pipeline_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    seen = set()
    for k in range(1000):
        passage, critique, expected, quotes = _planted_pair(rng, k)
        seen.update(quotes)
        out = mask_quotes(passage, critique)
        assert out == expected, (critique, out)
        assert oracles.longest_common_run(passage, out) < 4
        assert out.count("[quote]") == sum(q >= 4 for q in quotes)
        short_runs = [q for q in quotes if q < 4]
        if short_runs:
            assert oracles.longest_common_run(passage, out) == max(short_runs)
    assert seen == set(range(2, 9))
    assert time.perf_counter() - start < 60


# 6 --------------------------------------------------------------------------------


@pytest.mark.criterion(6, "short-field filter boundary at 7/8/9 characters")
def test_filter_boundary():
    long_text = "a passage that is long enough"
    records = [
        {"passage": long_text, "critique": "x" * 7},
        {"passage": long_text, "critique": "x" * 8},
        {"passage": long_text, "critique": "x" * 9},
        {"passage": "y" * 7, "critique": long_text},
        {"passage": "y" * 8, "critique": long_text + " too"},
        {"passage": "y" * 9, "critique": long_text + " also"},
        # lengths measured after masking: "[quote]" is 7 characters, "[quote]!" is 8
        {"passage": "one two three four five", "critique": "one two three four"},
        {"passage": "one two three four five", "critique": "one two three four!"},
        {"passage": "one two three four five", "critique": "one two three four!!"},
    ]
    pairs, report = run_pipeline([json.dumps(r) for r in records])
    kept = [(p.passage, p.critique) for p in pairs]
    assert kept == [
        (long_text, "x" * 8), (long_text, "x" * 9),
        ("y" * 8, long_text + " too"), ("y" * 9, long_text + " also"),
        ("one two three four five", "[quote]!"), ("one two three four five", "[quote]!!"),
    ]
    assert report.dropped["short_critique"] == 2 and report.dropped["short_passage"] == 1


# 7 --------------------------------------------------------------------------------


def _tied_frozen_model():
    """Identical, frozen towers: only the scale trains, and its gradient sign is set by the data."""
    model = CarpModel(toy_config())
    for name, p in model.passage_tower.params.items():
        model.critique_tower.params[name].data = p.data.copy()
    for p in [*model.passage_tower.params.values(), *model.critique_tower.params.values()]:
        p.requires_grad = False
    return model


def _near_duplicates(rng):
    """Eight rows that differ from a shared base in one token each, so all cosines stay close to 1."""
    base = rng.integers(5, 40, size=16)
    ids = np.tile(base, (8, 1))
    for i in range(8):
        ids[i, i] = 5 + (base[i] - 5 + int(rng.integers(1, 35))) % 35
    return TokenBatch(ids, np.ones_like(ids))


def _clamp_run(state, rng, critiques_of, batches=None):
    values = []
    for _ in range(100):
        P = (batches or (lambda r: random_batch(r, 8, 16, 40)))(rng)
        train_step_cached(state, P, critiques_of(P), 4)
        values.append(state.model.log_scale.item())
    return values


@pytest.mark.criterion(7, "log_scale stays clamped after each of 100 steps")
def test_clamp_conformance():
    lo, hi = -4.60517, 4.60517
    assert round(LOG_SCALE_MIN, 5) == lo and round(LOG_SCALE_MAX, 5) == hi
    ln100 = math.log(100)
    rng = np.random.default_rng(0)
    # ordinary training at an aggressive step size
    state = TrainState.create(CarpModel(toy_config()), TrainConfig(batch_size=8, chunk_size=4, learning_rate=0.5))
    values = _clamp_run(state, rng, lambda P: random_batch(rng, 8, 16, 40))
    # matching pairs push the scale up, mismatched pairs push it down; both runs start next to a bound.
    # near-duplicate rows keep the upward gradient well above float32 rounding near the bound
    up = TrainState.create(_tied_frozen_model(), TrainConfig(batch_size=8, chunk_size=4, learning_rate=0.01))
    up.model.log_scale.data = np.asarray(4.5, np.float32)
    values_up = _clamp_run(up, rng, lambda P: P, _near_duplicates)
    down = TrainState.create(_tied_frozen_model(), TrainConfig(batch_size=8, chunk_size=4, learning_rate=0.01))
    down.model.log_scale.data = np.asarray(-4.6, np.float32)
    values_down = _clamp_run(down, rng, lambda P: P[::-1])
    for v in values + values_up + values_down:
        assert -ln100 <= v <= ln100 and lo - 5e-6 <= v <= hi + 5e-6
    # the bounds were actually hit, so the check above is not vacuous
    assert max(values_up) == pytest.approx(hi, abs=5e-6)
    assert min(values_down) == pytest.approx(lo, abs=5e-6)


# 8 --------------------------------------------------------------------------------

FIXED_PAIRS = [
    ([0.5, 0.5], [0.75, 0.25]),
    ([0.75, 0.25], [0.5, 0.5]),
    ([0.2, 0.3, 0.5], [0.3, 0.3, 0.4]),
    ([1.0, 0.0, 0.0], [0.8, 0.1, 0.1]),
    ([0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]),
    ([0.6, 0.3, 0.1], [0.1, 0.3, 0.6]),
    ([0.05, 0.95], [0.5, 0.5]),
    ([0.4, 0.4, 0.1, 0.1], [0.1, 0.1, 0.4, 0.4]),
    ([1 / 9] * 9, [0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]),
    ([0.3, 0.0, 0.7], [0.2, 0.5, 0.3]),
]


def _dist(p):
    return ScoreDistribution(tuple(f"l{i}" for i in range(len(p))), p)


@pytest.mark.criterion(8, "KL and cosine against hand oracles; min-subtract softmax example")
def test_eval_metric_correctness():
    for h, m in FIXED_PAIRS:
        row = compare(_dist(h), _dist(m))
        assert abs(row.kl - oracles.kl(h, m)) <= 1e-6, (h, m)
        assert abs(row.cosine - oracles.cosine(h, m)) <= 1e-6, (h, m)
    assert abs(compare(_dist([0.5, 0.5]), _dist([0.75, 0.25])).kl - 0.14384) <= 5e-6
    votes = human_distribution(HumanVotes("toy", ("a", "b", "c"), (1, 2, 3)))
    np.testing.assert_allclose(votes.probabilities, [0.09003, 0.24473, 0.66524], atol=5e-6)
    for h, _ in FIXED_PAIRS:
        same = compare(_dist(h), _dist(h))
        assert same.cosine == pytest.approx(1.0, abs=1e-12) and same.kl == pytest.approx(0.0, abs=1e-12)


# 9 --------------------------------------------------------------------------------

TINY_TRAIN = ["--context-length", "32", "--layers", "1", "--model-dim", "16", "--heads", "2", "--encoding-dim", "32",
              "--feedforward-dim", "32", "--batch-size", "8", "--chunk-size", "4", "--steps", "6",
              "--validation-interval", "3", "--holdout", "16"]


def _cli_run(root: Path, monkeypatch) -> dict[str, bytes]:
    root.mkdir()
    monkeypatch.chdir(root)
    steps = [
        ["synth", "--out", "data", "--pairs", "200", "--seed", "7"],
        ["preprocess", "--in", "data/raw.jsonl", "--out", "pre/pairs.jsonl"],
        ["train", "--pairs", "pre/pairs.jsonl", "--out", "run", "--seed", "7", *TINY_TRAIN],
        ["classify", "--checkpoint", "run/checkpoint", "--story", "data/story.txt", "--out", "cls/nine.json"],
        ["classify", "--checkpoint", "run/checkpoint", "--story", "data/story.txt", "--specs", "data/specs.json",
         "--out", "cls/topics.json"],
        ["evaluate", "--stories", "data/stories.json", "--votes", "data/votes.json", "--specs", "data/specs.json",
         "--checkpoint", "run/checkpoint", "--random-baseline", "--external", "lm=data/external_scores.json",
         "--out", "eval"],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.suffix in (".json", ".jsonl")}


@pytest.mark.criterion(9, "two seeded CLI runs give byte-identical JSON")
def test_end_to_end_determinism(tmp_path, monkeypatch):
    first = _cli_run(tmp_path / "a", monkeypatch)
    second = _cli_run(tmp_path / "b", monkeypatch)
    assert "eval/report.json" in first and "cls/nine.json" in first and "run/train_log.jsonl" in first
    assert first.keys() == second.keys()
    assert [k for k in first if first[k] != second[k]] == []


# 10 -------------------------------------------------------------------------------


@pytest.mark.criterion(10, "trained model beats the random baseline on mean cosine")
def test_suite_report(learned, tmp_path):
    raw = SyntheticCorpus(seed=0).eval_set()
    (tmp_path / "external.json").write_text(json.dumps(raw["external_scores"]))
    specs = [ClassifierSpec(s["label"], s["variants"]) for s in raw["specs"]]
    votes = [HumanVotes(v["story_id"], v["labels"], v["counts"]) for v in raw["votes"]]
    stories = {s["story_id"]: s["text"] for s in raw["stories"]}
    methods = {"carp": learned["model"], "random": RandomEmbeddingScorer(dim=64, seed=0),
               "external": ExternalScores.load(tmp_path / "external.json")}
    reports = compare_methods(methods, stories, votes, specs)
    for name, report in reports.items():
        assert len(report.rows) == 7
        assert set(report.summary["cosine"]) == {"min", "q1", "median", "q3", "max", "mean"}
        print(f"{name}: mean cosine {report.summary['cosine']['mean']:.4f}, mean KL {report.summary['kl']['mean']:.4f}")
    assert reports["carp"].summary["cosine"]["mean"] > reports["random"].summary["cosine"]["mean"]
