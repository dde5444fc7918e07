"""Symmetric contrastive objective, gradient-cached training steps and validation.

The cached step trades compute for memory: the whole contrastive batch is
first embedded without recording, then each chunk is re-embedded with
recording and spliced into the cached embedding matrices, so every chunk's
backward pass sees the full ``n x n`` objective while only one chunk's
encoder activations are alive at a time.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from carp import numerics as nx
from carp.errors import DataError, DimensionError
from carp.model import CarpModel
from carp.numerics import Tensor
from carp.tokenizer import TokenBatch

log = logging.getLogger(__name__)


def contrastive_loss(logits: Tensor) -> Tensor:
    """Mean of row-wise and column-wise cross entropy with diagonal targets."""
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise DimensionError(f"contrastive loss needs a square matrix, got {logits.shape}")
    targets = np.arange(logits.shape[0])
    return (nx.cross_entropy_rows(logits, targets) + nx.cross_entropy_rows(logits.T, targets)) * 0.5


def retrieval_accuracy(logits: np.ndarray) -> float:
    """Fraction of rows and of columns whose argmax is the diagonal, averaged."""
    idx = np.arange(logits.shape[0])
    rows = np.mean(logits.argmax(axis=1) == idx)
    cols = np.mean(logits.argmax(axis=0) == idx)
    return float((rows + cols) / 2)


class AdamW:
    """Adam with decoupled weight decay over a fixed dict of parameters."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype, copy=False)


@dataclass
class TrainConfig:
    batch_size: int = 32
    chunk_size: int = 8
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 500
    validation_interval: int = 50
    seed: int = 0
    strict: bool = False

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 1 <= self.chunk_size <= self.batch_size:
            raise ValueError("need 1 <= chunk_size <= batch_size")
        if self.batch_size % self.chunk_size:
            raise ValueError(f"batch_size {self.batch_size} is not divisible by chunk_size {self.chunk_size}")
        if self.steps < 0 or self.validation_interval < 1:
            raise ValueError("steps must be >= 0 and validation_interval >= 1")


@dataclass
class TrainState:
    model: CarpModel
    optimizer: AdamW
    step: int = 0

    @classmethod
    def create(cls, model: CarpModel, config: TrainConfig | None = None) -> TrainState:
        config = config or TrainConfig()
        opt = AdamW(
            model.parameters(), lr=config.learning_rate, betas=config.betas, eps=config.eps,
            weight_decay=config.weight_decay,
        )
        return cls(model, opt)


@dataclass
class StepStats:
    loss: float
    peak_tape_nodes: int = 0
    peak_activation_elements: int = 0
    chunk_tapes: list[int] = field(default_factory=list)


def _check_aligned(passages: TokenBatch, critiques: TokenBatch) -> int:
    if len(passages) != len(critiques):
        raise DimensionError(f"{len(passages)} passages but {len(critiques)} critiques")
    return len(passages)


def embed_no_grad(encode: Callable[[TokenBatch], Tensor], batch: TokenBatch, chunk_size: int) -> np.ndarray:
    with nx.no_grad():
        return np.concatenate([encode(batch[s : s + chunk_size]).data for s in range(0, len(batch), chunk_size)])


def full_batch_gradients(model: CarpModel, passages: TokenBatch, critiques: TokenBatch) -> StepStats:
    """Zero, then fill parameter gradients of the contrastive loss in one pass."""
    _check_aligned(passages, critiques)
    model.zero_grad()
    with nx.Tape() as tape:
        loss = contrastive_loss(model.logits(model.encode_passages(passages), model.encode_critiques(critiques)))
    tape.backward(loss)
    return StepStats(loss.item(), tape.num_nodes, tape.activation_elements, [tape.num_nodes])


def cached_gradients(model: CarpModel, passages: TokenBatch, critiques: TokenBatch, chunk_size: int) -> StepStats:
    """Zero, then fill parameter gradients chunk by chunk; equal to the full-batch gradients."""
    n = _check_aligned(passages, critiques)
    if chunk_size < 1 or n % chunk_size:
        raise ValueError(f"batch of {n} is not divisible into chunks of {chunk_size}")
    model.zero_grad()
    p_cache = embed_no_grad(model.encode_passages, passages, chunk_size)
    c_cache = embed_no_grad(model.encode_critiques, critiques, chunk_size)
    with nx.no_grad():
        loss = contrastive_loss(model.logits(Tensor(p_cache), Tensor(c_cache))).item()

    stats = StepStats(loss)
    for start in range(0, n, chunk_size):
        stop = start + chunk_size
        with nx.Tape() as tape:
            p_live = model.encode_passages(passages[start:stop])
            c_live = model.encode_critiques(critiques[start:stop])
            p_all = nx.concat([Tensor(p_cache[:start]), p_live, Tensor(p_cache[stop:])])
            c_all = nx.concat([Tensor(c_cache[:start]), c_live, Tensor(c_cache[stop:])])
            chunk_loss = contrastive_loss(model.logits(p_all, c_all))
        tape.backward(chunk_loss)
        stats.chunk_tapes.append(tape.num_nodes)
        stats.peak_tape_nodes = max(stats.peak_tape_nodes, tape.num_nodes)
        stats.peak_activation_elements = max(stats.peak_activation_elements, tape.activation_elements)
        del tape

    # every chunk recomputed the whole loss, so log_scale saw its gradient n/c times
    if model.log_scale.grad is not None:
        model.log_scale.grad = model.log_scale.grad * (chunk_size / n)
    return stats


def _apply_update(state: TrainState) -> None:
    state.optimizer.step()
    state.model.clamp_log_scale()
    state.step += 1


def train_step_full(state: TrainState, passages: TokenBatch, critiques: TokenBatch) -> float:
    """One un-chunked optimisation step; returns the pre-update loss."""
    stats = full_batch_gradients(state.model, passages, critiques)
    _apply_update(state)
    return stats.loss


def train_step_cached(state: TrainState, passages: TokenBatch, critiques: TokenBatch, chunk_size: int) -> float:
    """One gradient-cached optimisation step; returns the pre-update full-batch loss."""
    stats = cached_gradients(state.model, passages, critiques, chunk_size)
    _apply_update(state)
    return stats.loss


def validate(model: CarpModel | TrainState, passages: TokenBatch, critiques: TokenBatch, chunk_size: int = 64):
    """Return ``(val_loss, val_accuracy)`` over the full holdout similarity matrix."""
    if isinstance(model, TrainState):
        model = model.model
    if _check_aligned(passages, critiques) < 2:
        raise ValueError("validation needs at least 2 pairs")
    p = embed_no_grad(model.encode_passages, passages, chunk_size)
    c = embed_no_grad(model.encode_critiques, critiques, chunk_size)
    with nx.no_grad():
        logits = model.logits(Tensor(p), Tensor(c))
        loss = contrastive_loss(logits).item()
    return loss, retrieval_accuracy(logits.data)


def validate_groups(model: CarpModel | TrainState, passages: TokenBatch, critiques: TokenBatch, group_size: int):
    """Mean ``(val_loss, val_accuracy)`` over consecutive groups of ``group_size`` pairs.

    Retrieval difficulty grows with the candidate count, so accuracy "at V"
    is measured on V-sized groups; a ragged tail shorter than V is dropped.
    """
    n = _check_aligned(passages, critiques)
    if not 2 <= group_size <= n:
        raise ValueError(f"group size must be in [2, {n}], got {group_size}")
    results = [
        validate(model, passages[i : i + group_size], critiques[i : i + group_size])
        for i in range(0, n - group_size + 1, group_size)
    ]
    return float(np.mean([r[0] for r in results])), float(np.mean([r[1] for r in results]))


class BatchSampler:
    """Index batches drawn without replacement, reshuffled every epoch."""

    def __init__(self, size: int, batch_size: int, seed: int, strict: bool = False):
        if size < batch_size:
            raise DataError(f"dataset has {size} pairs, fewer than one batch of {batch_size}")
        self.size, self.batch_size, self.strict = size, batch_size, strict
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._order = self.rng.permutation(size)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.size:
            if self.strict:
                raise DataError(f"dataset exhausted after epoch {self.epoch}")
            self.epoch += 1
            self._order = self.rng.permutation(self.size)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def fit(
    state: TrainState,
    passages: TokenBatch,
    critiques: TokenBatch,
    config: TrainConfig,
    holdout: tuple[TokenBatch, TokenBatch] | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> list[dict]:
    """Train for ``config.steps`` cached steps and return the validation log.

    A row ``{step, train_loss, val_loss, val_accuracy, log_scale}`` is logged
    (and a checkpoint written) every ``validation_interval`` steps and after
    the last step.
    """
    _check_aligned(passages, critiques)
    sampler = BatchSampler(len(passages), config.batch_size, config.seed, config.strict)
    rows: list[dict] = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for _ in range(config.steps):
            idx = sampler.next()
            train_loss = train_step_cached(
                state, TokenBatch(passages.ids[idx], passages.mask[idx]),
                TokenBatch(critiques.ids[idx], critiques.mask[idx]), config.chunk_size,
            )
            if state.step % config.validation_interval and state.step != config.steps:
                continue
            val_loss = val_acc = None
            if holdout is not None:
                val_loss, val_acc = validate(state.model, *holdout)
            row = {
                "step": state.step,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "val_accuracy": val_acc,
                "log_scale": float(state.model.log_scale.data),
            }
            rows.append(row)
            log.info("step %d train_loss %.4f val_loss %s val_acc %s", state.step, train_loss, val_loss, val_acc)
            if sink:
                sink.write(json.dumps(row) + "\n")
                sink.flush()
            if checkpoint_dir:
                state.model.save(Path(checkpoint_dir) / f"step_{state.step:06d}")
    finally:
        if sink:
            sink.close()
    return rows


def config_dict(config: TrainConfig) -> dict:
    out = asdict(config)
    out["betas"] = list(config.betas)
    return out
