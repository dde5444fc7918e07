"""Passage/critique dual encoder with a learned, clamped logit scale."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from carp import numerics as nx
from carp.errors import DataError, DimensionError
from carp.numerics import Tensor
from carp.tokenizer import TokenBatch, Vocabulary, encode_batch

LOG_SCALE_MIN = math.log(1 / 100)
LOG_SCALE_MAX = math.log(100)
LOG_SCALE_INIT = math.log(1 / 0.07)
INIT_STD = 0.02
_MASK_NEG = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_length: int = 64
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    encoding_dim: int = 2048
    feedforward_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        for name in ("vocab_size", "context_length", "layers", "model_dim", "heads", "encoding_dim", "feedforward_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def tower_param_count(self) -> int:
        v, t, d, f = self.vocab_size, self.context_length, self.model_dim, self.feedforward_dim
        per_block = 4 * d * d + 2 * d * f + 9 * d + f
        return v * d + t * d + self.layers * per_block + 2 * d + d * self.encoding_dim

    def param_count(self) -> int:
        """Both towers plus the scalar log-scale."""
        return 2 * self.tower_param_count() + 1


class EncoderTower:
    """Token + position embeddings, pre-norm transformer blocks, pooling, projection."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d, f = config.model_dim, config.feedforward_dim

        def normal(*shape):
            return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(np.float32), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n, np.float32), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape, np.float32), requires_grad=True)

        p: dict[str, Tensor] = {
            "tok_emb": normal(config.vocab_size, d),
            "pos_emb": normal(config.context_length, d),
        }
        for i in range(config.layers):
            b = f"block{i}."
            p[b + "ln1.gain"], p[b + "ln1.bias"] = ones(d), zeros(d)
            for w in ("q", "k", "v", "o"):
                p[b + f"attn.w{w}"], p[b + f"attn.b{w}"] = normal(d, d), zeros(d)
            p[b + "ln2.gain"], p[b + "ln2.bias"] = ones(d), zeros(d)
            p[b + "ffn.w1"], p[b + "ffn.b1"] = normal(d, f), zeros(f)
            p[b + "ffn.w2"], p[b + "ffn.b2"] = normal(f, d), zeros(d)
        p["ln_f.gain"], p["ln_f.bias"] = ones(d), zeros(d)
        p["proj"] = normal(d, config.encoding_dim)
        for name, t in p.items():
            t.name = name
        self.params = p

    def _attention(self, x: Tensor, key_bias: Tensor, prefix: str) -> Tensor:
        p, cfg = self.params, self.config
        b, t, d = x.shape
        h = cfg.heads
        dh = d // h

        def heads(w: str) -> Tensor:
            return (x @ p[prefix + "w" + w] + p[prefix + "b" + w]).reshape(b, t, h, dh)

        q = heads("q").transpose(0, 2, 1, 3)
        k_t = heads("k").transpose(0, 2, 3, 1)
        v = heads("v").transpose(0, 2, 1, 3)
        att = nx.softmax((q @ k_t) * (1.0 / math.sqrt(dh)) + key_bias)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return out @ p[prefix + "wo"] + p[prefix + "bo"]

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Unit-norm encodings (b x encoding_dim) for ``ids``/``mask`` of width <= context_length."""
        p = self.params
        b, t = ids.shape
        if t > self.config.context_length:
            raise DimensionError(f"sequence width {t} exceeds context length {self.config.context_length}")
        dtype = p["tok_emb"].dtype
        x = nx.embedding(p["tok_emb"], ids) + nx.embedding(p["pos_emb"], np.arange(t))
        key_bias = Tensor(((1 - mask) * _MASK_NEG).astype(dtype)[:, None, None, :])
        for i in range(self.config.layers):
            pre = f"block{i}."
            x = x + self._attention(nx.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"]), key_bias, pre + "attn.")
            hidden = nx.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            hidden = nx.gelu(hidden @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"])
            x = x + (hidden @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"])
        x = nx.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
        pooled = nx.l2_normalize(nx.masked_sum(x, mask))
        return nx.l2_normalize(pooled @ p["proj"])


class CarpModel:
    """Two independent encoder towers and a shared log-scale.

    ``vocab`` is optional for pure tensor work but required by anything that
    starts from raw text (zero-shot scoring, the CLI).
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary | None = None):
        if vocab is not None and len(vocab) != config.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} tokens, config expects {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        passage_rng, critique_rng = np.random.default_rng(config.seed).spawn(2)
        self.passage_tower = EncoderTower(config, passage_rng)
        self.critique_tower = EncoderTower(config, critique_rng)
        self.log_scale = Tensor(np.asarray(LOG_SCALE_INIT, dtype=np.float32), requires_grad=True, name="log_scale")
        self.clamp_log_scale()

    def parameters(self) -> dict[str, Tensor]:
        params = {f"passage.{k}": v for k, v in self.passage_tower.params.items()}
        params.update({f"critique.{k}": v for k, v in self.critique_tower.params.items()})
        params["log_scale"] = self.log_scale
        return params

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        nx.zero_grad(self.parameters().values())

    def to_dtype(self, dtype) -> CarpModel:
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def _check(self, batch: TokenBatch) -> None:
        if batch.context_length != self.config.context_length:
            raise DimensionError(
                f"batch context length {batch.context_length} != model context length {self.config.context_length}"
            )

    def encode_passages(self, batch: TokenBatch) -> Tensor:
        self._check(batch)
        return self.passage_tower.forward(batch.ids, batch.mask)

    def encode_critiques(self, batch: TokenBatch) -> Tensor:
        self._check(batch)
        return self.critique_tower.forward(batch.ids, batch.mask)

    def logits(self, passages: Tensor, critiques: Tensor) -> Tensor:
        """``exp(log_scale) * <P_i, C_j>`` for unit-norm rows."""
        if passages.ndim != 2 or critiques.ndim != 2 or passages.shape[1] != critiques.shape[1]:
            raise DimensionError(f"cannot compare embeddings {passages.shape} and {critiques.shape}")
        return (passages @ critiques.T) * nx.exp(self.log_scale)

    def clamp_log_scale(self) -> None:
        # bounds are rounded inward in the parameter dtype so the stored value never leaves the interval
        dt = self.log_scale.dtype
        lo, hi = dt.type(LOG_SCALE_MIN), dt.type(LOG_SCALE_MAX)
        if float(lo) < LOG_SCALE_MIN:
            lo = np.nextafter(lo, dt.type(0))
        if float(hi) > LOG_SCALE_MAX:
            hi = np.nextafter(hi, dt.type(0))
        self.log_scale.data = np.clip(self.log_scale.data, lo, hi).astype(dt)

    def embed_texts(self, texts: list[str], side: str, chunk_size: int = 64) -> np.ndarray:
        """No-grad unit-norm embeddings of raw texts; ``side`` is 'passage' or 'critique'."""
        if self.vocab is None:
            raise ValueError("model has no vocabulary attached")
        encode = {"passage": self.encode_passages, "critique": self.encode_critiques}[side]
        batch = encode_batch(texts, self.vocab, self.config.context_length)
        with nx.no_grad():
            parts = [encode(batch[i : i + chunk_size]).data for i in range(0, len(batch), chunk_size)]
        return np.concatenate(parts)

    def save(self, directory: str | Path) -> None:
        """Write ``params.npz``, ``model_config.json`` and (if present) ``vocab.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nx.save_params(directory / "params.npz", self.parameters())
        (directory / "model_config.json").write_text(json.dumps(asdict(self.config), indent=2, sort_keys=True) + "\n")
        if self.vocab is not None:
            self.vocab.save(directory / "vocab.json")

    @classmethod
    def load(cls, directory: str | Path) -> CarpModel:
        directory = Path(directory)
        try:
            config = ModelConfig(**json.loads((directory / "model_config.json").read_text()))
        except (OSError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{directory}: unreadable model config ({exc})") from exc
        vocab_path = directory / "vocab.json"
        vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else None
        model = cls(config, vocab)
        stored = nx.load_params(directory / "params.npz")
        params = model.parameters()
        if set(stored) != set(params):
            raise DataError(f"{directory}: parameter names do not match the config")
        for name, p in params.items():
            if stored[name].shape != p.shape:
                raise DataError(f"{directory}: parameter {name} has shape {stored[name].shape}, expected {p.shape}")
            p.data = stored[name].astype(p.dtype)
        return model
