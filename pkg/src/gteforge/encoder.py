"""Tokenizer, vocabulary and the mean-pooled transformer text encoder."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, UNK, BOS = "[PAD]", "[UNK]", "[BOS]"
RESERVED = (PAD, UNK, BOS)
PAD_ID, UNK_ID, BOS_ID = 0, 1, 2

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

# attention logit for masked keys; exp() of it underflows to exactly 0
_MASK_LOGIT = -1e9


class InputError(ValueError):
    """Bad caller-supplied data (empty corpus, id out of range, ...)."""


def split_tokens(text: str) -> list[str]:
    """Lowercase and split into word runs and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Injective token -> id map with ``[PAD]=0, [UNK]=1, [BOS]=2``."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            raise InputError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary tokens must be unique")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def build_vocab(corpus: Iterable[str], vocab_size: int) -> Vocabulary:
    """Frequency-ranked vocabulary; ties keep first-seen order."""
    counts: Counter = Counter()
    seen_any = False
    for text in corpus:
        seen_any = True
        counts.update(split_tokens(text))
    if not seen_any:
        raise InputError("cannot build a vocabulary from an empty corpus")
    if vocab_size < len(RESERVED):
        raise InputError(f"vocab_size must be at least {len(RESERVED)}")
    # Counter preserves insertion order, and sorted() is stable
    ranked = sorted((t for t in counts if t not in RESERVED), key=lambda t: -counts[t])
    return Vocabulary(list(RESERVED) + ranked[: vocab_size - len(RESERVED)])


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> tuple[list[int], list[int]]:
    """``[BOS] + tokens`` truncated to ``max_len`` and right-padded with PAD."""
    if max_len < 2:
        raise InputError("max_len must be >= 2")
    ids = [BOS_ID] + [vocab.id_of(t) for t in split_tokens(text)]
    ids = ids[:max_len]
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    return ids + [PAD_ID] * (max_len - len(ids)), mask


def tokenize_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Tokenize and pad to the longest row (never beyond ``max_len``).

    Embeddings do not depend on trailing padding, so trimming the common PAD
    tail only saves work.
    """
    rows = [tokenize(t, vocab, max_len) for t in texts]
    if not rows:
        return np.zeros((0, 1), dtype=np.int64), np.zeros((0, 1), dtype=np.int64)
    width = max(sum(m) for _, m in rows)
    ids = np.array([r[0][:width] for r in rows], dtype=np.int64)
    mask = np.array([r[1][:width] for r in rows], dtype=np.int64)
    return ids, mask


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 2000
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 64
    max_seq_len: int = 512
    init_std: float = 0.02
    layer_norm_eps: float = 1e-6
    pool_include_bos: bool = True

    def __post_init__(self):
        if self.num_heads < 1 or self.embed_dim < 1 or self.embed_dim % self.num_heads:
            raise InputError("embed_dim must be a positive multiple of num_heads")
        if self.max_seq_len < 1 or self.vocab_size < len(RESERVED):
            raise InputError("max_seq_len must be >= 1 and vocab_size >= 3")
        if self.num_layers < 0 or self.ffn_dim < 1 or self.init_std <= 0:
            raise InputError("num_layers >= 0, ffn_dim >= 1 and init_std > 0 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    """Name -> shape for every trainable tensor, in canonical order."""
    d, f = cfg.embed_dim, cfg.ffn_dim
    shapes = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.gamma": (d,), p + "ln1.beta": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.gamma": (d,), p + "ln2.beta": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
        })
    shapes["ln_f.gamma"] = (d,)
    shapes["ln_f.beta"] = (d,)
    return shapes


def parameter_count(cfg: EncoderConfig) -> int:
    return int(sum(math.prod(s) for s in parameter_shapes(cfg).values()))


def _truncated_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    # resample anything beyond two standard deviations
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class EncoderModel:
    """Pre-LN transformer encoder followed by masked mean pooling."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise InputError("parameter names do not match the encoder config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise InputError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma":
                data = np.ones(shape)
            elif leaf == "beta" or leaf.startswith("b"):
                data = np.zeros(shape)
            else:
                data = _truncated_normal(rng, shape, config.init_std)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, token_ids, mask, return_hidden: bool = False):
        """Embeddings ``[B, d]``; with ``return_hidden`` also the final token states ``[B, L, d]``."""
        cfg = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        m = np.asarray(mask, dtype=np.float64)
        if ids.ndim != 2 or m.shape != ids.shape:
            raise InputError(f"token_ids {ids.shape} and mask {m.shape} must be equal 2-d shapes")
        B, L = ids.shape
        if L > cfg.max_seq_len:
            raise InputError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise InputError(f"token ids must lie in [0, {cfg.vocab_size})")
        if B and m.sum(axis=1).min() < 1:
            raise InputError("every row needs at least one unmasked position")
        d, H = cfg.embed_dim, cfg.num_heads
        dh = d // H
        P = self.params

        x = T.embedding(P["tok_emb"], ids)
        pos = T.index(P["pos_emb"], slice(0, L))
        x = x + T.broadcast_to(pos, (B, L, d))
        x = T.reshape(x, (B * L, d))

        key_bias = np.where(m > 0, 0.0, _MASK_LOGIT)[:, None, None, :]
        key_bias = T.Tensor(np.broadcast_to(key_bias, (B, H, L, L)))
        inv_sqrt = 1.0 / math.sqrt(dh)

        def split_heads(t):
            return T.transpose(T.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        for i in range(cfg.num_layers):
            p = f"layer{i}."
            h = self._layer_norm(x, p + "ln1")
            q = split_heads(self._linear(h, p + "attn.wq", p + "attn.bq"))
            k = split_heads(self._linear(h, p + "attn.wk", p + "attn.bk"))
            v = split_heads(self._linear(h, p + "attn.wv", p + "attn.bv"))
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt) + key_bias
            lse = T.logsumexp(scores, axis=-1, keepdims=True)
            attn = T.exp(scores - T.broadcast_to(lse, scores.shape))
            ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B * L, d))
            x = x + self._linear(ctx, p + "attn.wo", p + "attn.bo")
            h = self._layer_norm(x, p + "ln2")
            h = T.gelu(self._linear(h, p + "ffn.w1", p + "ffn.b1"))
            x = x + self._linear(h, p + "ffn.w2", p + "ffn.b2")

        x = self._layer_norm(x, "ln_f")
        hidden = T.reshape(x, (B, L, d))

        pool = m.copy()
        if not cfg.pool_include_bos and L > 1:
            pool[:, 0] = 0.0
            # a BOS-only row falls back to pooling BOS itself
            empty = pool.sum(axis=1) == 0
            pool[empty, 0] = 1.0
        weights = pool / pool.sum(axis=1, keepdims=True)
        w = T.Tensor(np.broadcast_to(weights[:, :, None], (B, L, d)))
        pooled = T.sum(hidden * w, axis=1)
        return (pooled, hidden) if return_hidden else pooled

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        y = T.matmul(x, self.params[w])
        return y + T.broadcast_to(self.params[b], y.shape)

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        n, d = x.shape
        mu = T.mean(x, axis=1, keepdims=True)
        xc = x - T.broadcast_to(mu, (n, d))
        var = T.mean(xc * xc, axis=1, keepdims=True)
        std = T.sqrt(var + self.config.layer_norm_eps)
        xn = xc / T.broadcast_to(std, (n, d))
        gamma = T.broadcast_to(self.params[prefix + ".gamma"], (n, d))
        beta = T.broadcast_to(self.params[prefix + ".beta"], (n, d))
        return xn * gamma + beta


def encode(model: EncoderModel, token_ids, mask) -> Tensor:
    """Mean-pooled text embeddings ``[B, d]``; differentiable under a tape."""
    return model.forward(token_ids, mask)


class Embedder:
    """Text -> numpy embedding callable used by the evaluators.

    Runs without a tape, so nothing is recorded.
    """

    def __init__(self, model: EncoderModel, vocab: Vocabulary, max_len: Optional[int] = None,
                 batch_size: int = 64):
        self.model = model
        self.vocab = vocab
        self.max_len = max_len or model.config.max_seq_len
        self.batch_size = batch_size

    @property
    def dim(self) -> int:
        return self.model.config.embed_dim

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        out = np.zeros((len(texts), self.dim))
        for start in range(0, len(texts), self.batch_size):
            chunk = texts[start:start + self.batch_size]
            ids, mask = tokenize_batch(chunk, self.vocab, self.max_len)
            out[start:start + len(chunk)] = encode(self.model, ids, mask).data
        return out
