import numpy as np
import pytest

from carp.model import CarpModel, ModelConfig
from carp.tokenizer import TokenBatch


def toy_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=40, context_length=16, layers=2, model_dim=32, heads=4, encoding_dim=32,
                feedforward_dim=64, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(rng: np.random.Generator, n: int, T: int, vocab_size: int, min_len: int = 2) -> TokenBatch:
    """Random ids with a PAD tail of random length on each row."""
    ids = rng.integers(5, vocab_size, size=(n, T))
    lengths = rng.integers(min_len, T + 1, size=n)
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.int64)
    return TokenBatch(np.where(mask == 1, ids, 0), mask)


@pytest.fixture
def toy_model():
    return CarpModel(toy_config())


@pytest.fixture
def toy_model64():
    return CarpModel(toy_config()).to_dtype(np.float64)


LEARN = dict(pairs=2000, holdout=256, steps=500, batch_size=32, chunk_size=8, learning_rate=1e-4,
             context_length=32, seed=0)


@pytest.fixture(scope="session")
def learned():
    """One toy model trained on the synthetic corpus, shared by the slow tests.

    Returns a dict with the model, encoded held-out pairs, the training log rows
    and the wall-clock training time in seconds.
    """
    import json
    import time

    from carp.pipeline import run_pipeline
    from carp.synthetic import SyntheticCorpus
    from carp.tokenizer import build_vocab, encode_batch
    from carp.training import TrainConfig, TrainState, fit

    raw = SyntheticCorpus(seed=LEARN["seed"]).pairs(LEARN["pairs"])
    pairs, _ = run_pipeline([json.dumps(r) for r in raw])
    order = np.random.default_rng(LEARN["seed"]).permutation(len(pairs))
    hold = [pairs[i] for i in order[: LEARN["holdout"]]]
    train = [pairs[i] for i in order[LEARN["holdout"] :]]
    vocab = build_vocab([t for p in train for t in (p.passage, p.critique)], 8000)
    T = LEARN["context_length"]

    def enc(subset):
        return (encode_batch([p.passage for p in subset], vocab, T),
                encode_batch([p.critique for p in subset], vocab, T))

    model = CarpModel(ModelConfig(vocab_size=len(vocab), context_length=T, seed=LEARN["seed"]), vocab)
    cfg = TrainConfig(batch_size=LEARN["batch_size"], chunk_size=LEARN["chunk_size"],
                      learning_rate=LEARN["learning_rate"], steps=LEARN["steps"], validation_interval=50,
                      seed=LEARN["seed"])
    start = time.perf_counter()
    rows = fit(TrainState.create(model, cfg), *enc(train), cfg, enc(hold))
    return {"model": model, "holdout": enc(hold), "holdout_pairs": hold, "rows": rows,
            "seconds": time.perf_counter() - start, "n_pairs": len(pairs)}


CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.fixture
def criterion(request):
    """Records PASS/FAIL for an acceptance criterion, keyed by the test's ``number`` marker."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    yield
    failed = getattr(request.node, "rep_call", None) is None or request.node.rep_call.failed
    CRITERIA[number] = ("FAIL" if failed else "PASS", title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        status, title = CRITERIA[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title}")
