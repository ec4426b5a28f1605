"""Tokenizer and a small post-LN transformer encoder with sentence pooling."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as F
from .errors import ConfigError, ContractError, DataError
from .tensor import Tensor

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
MAX_VOCAB = 8192
INIT_STD = 0.02
MASK_VALUE = -1e9

POOLING_METHODS = ("cls", "cls_wom", "first_last_avg", "top2_avg", "avg")

_TOKEN_RE = re.compile(r"\[sep\]|[^\W_]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation.

    The literal field separator ``[SEP]`` survives as one token.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ContractError("vocabulary must start with the special tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("duplicate tokens in vocabulary")
        self.index["[sep]"] = SEP

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)


def build_vocab(corpus: Sequence[str], max_size: int = MAX_VOCAB) -> Vocabulary:
    """Frequency-ranked vocabulary, ties broken lexicographically."""
    if len(corpus) == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    if max_size < len(SPECIAL_TOKENS):
        raise ConfigError("max vocabulary size must leave room for the special tokens")
    counts = Counter(w for text in corpus for w in split_words(text) if w != "[sep]")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    body = [tok for tok, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
    return Vocabulary(list(SPECIAL_TOKENS) + body)


def tokenize(text: str, vocab: Vocabulary, max_len: int = 64) -> list[int]:
    ids = [vocab.id(w) for w in split_words(text)]
    return [CLS] + ids[: max_len - 1]


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    ff_dim: int = 256
    max_len: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1 or self.heads < 1 or self.ff_dim < 1:
            raise ConfigError("encoder sizes must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"model dim {self.dim} not divisible by {self.heads} heads")
        if self.max_len < 3:
            raise ConfigError("max sequence length must be at least 3")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# parameters


def _gauss(rng, *shape):
    return rng.normal(0.0, INIT_STD, size=shape)


def init_attention(rng, dim: int, prefix: str) -> dict[str, np.ndarray]:
    # no key bias: it shifts every score of a query equally and never gets a gradient
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}w{name}"] = _gauss(rng, dim, dim)
        if name != "k":
            p[f"{prefix}b{name}"] = np.zeros(dim)
    return p


def init_transformer_layer(rng, dim: int, ff_dim: int, prefix: str) -> dict[str, np.ndarray]:
    p = init_attention(rng, dim, prefix + "attn.")
    p[prefix + "ln1.g"] = np.ones(dim)
    p[prefix + "ln1.b"] = np.zeros(dim)
    p[prefix + "ffn.w1"] = _gauss(rng, dim, ff_dim)
    p[prefix + "ffn.b1"] = np.zeros(ff_dim)
    p[prefix + "ffn.w2"] = _gauss(rng, ff_dim, dim)
    p[prefix + "ffn.b2"] = np.zeros(dim)
    p[prefix + "ln2.g"] = np.ones(dim)
    p[prefix + "ln2.b"] = np.zeros(dim)
    return p


def init_encoder(config: EncoderConfig, vocab_size: int, rng: np.random.Generator,
                 prefix: str = "encoder.") -> dict[str, np.ndarray]:
    d = config.dim
    p = {
        prefix + "tok_emb": _gauss(rng, vocab_size, d),
        prefix + "pos_emb": _gauss(rng, config.max_len, d),
        prefix + "emb_ln.g": np.ones(d),
        prefix + "emb_ln.b": np.zeros(d),
    }
    for i in range(config.layers):
        p.update(init_transformer_layer(rng, d, config.ff_dim, f"{prefix}layer{i}."))
    p[prefix + "pooler.w"] = _gauss(rng, d, d)
    p[prefix + "pooler.b"] = np.zeros(d)
    return p


def parameter_count(config: EncoderConfig, vocab_size: int) -> int:
    d, f = config.dim, config.ff_dim
    per_layer = 4 * d * d + 3 * d + 2 * d * f + f + d + 4 * d
    return vocab_size * d + config.max_len * d + 2 * d + config.layers * per_layer + d * d + d


# ---------------------------------------------------------------------------
# forward pass


def multi_head_attention(query: Tensor, context: Tensor, params: Mapping, prefix: str,
                         heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``context`` for every query row.

    ``query`` is [B, Tq, D] and ``context`` [B, Tk, D]; ``key_mask`` [B, Tk]
    marks real (1) versus padded (0) key positions.
    """
    B, Tq, D = query.shape
    Tk = context.shape[1]
    dh = D // heads

    def split(x, T):
        return F.swapaxes(F.reshape(x, (B, T, heads, dh)), 1, 2)

    q = split(F.linear(query, params[prefix + "wq"], params[prefix + "bq"]), Tq)
    k = split(F.matmul(context, params[prefix + "wk"]), Tk)
    v = split(F.linear(context, params[prefix + "wv"], params[prefix + "bv"]), Tk)
    scores = F.mul(F.matmul(q, F.transpose(k)), 1.0 / np.sqrt(dh))
    if key_mask is not None:
        scores = F.add(scores, np.where(key_mask, 0.0, MASK_VALUE)[:, None, None, :])
    weights = F.softmax(scores, axis=-1)
    out = F.reshape(F.swapaxes(F.matmul(weights, v), 1, 2), (B, Tq, D))
    return F.linear(out, params[prefix + "wo"], params[prefix + "bo"])


def transformer_layer(x: Tensor, params: Mapping, prefix: str, heads: int,
                      key_mask: np.ndarray | None = None, dropout: float = 0.0,
                      rng: np.random.Generator | None = None) -> Tensor:
    attn = multi_head_attention(x, x, params, prefix + "attn.", heads, key_mask)
    x = F.layer_norm(F.add(x, F.dropout(attn, dropout, rng)),
                     params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    h = F.gelu(F.linear(x, params[prefix + "ffn.w1"], params[prefix + "ffn.b1"]))
    h = F.linear(h, params[prefix + "ffn.w2"], params[prefix + "ffn.b2"])
    return F.layer_norm(F.add(x, F.dropout(h, dropout, rng)),
                        params[prefix + "ln2.g"], params[prefix + "ln2.b"])


def pad_batch(batch_ids: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(ids) for ids in batch_ids)
    ids = np.full((len(batch_ids), T), PAD, dtype=np.int64)
    mask = np.zeros((len(batch_ids), T), dtype=bool)
    for i, seq in enumerate(batch_ids):
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
    return ids, mask


def encode_batch(batch_ids: Sequence[Sequence[int]], params: Mapping, config: EncoderConfig,
                 prefix: str = "encoder.", rng: np.random.Generator | None = None,
                 ) -> tuple[list[Tensor], np.ndarray]:
    """Encode padded sequences; returns per-layer outputs [B,T,d] and the mask.

    Index 0 of the returned list is the embedding layer, index ``i`` the
    output of transformer block ``i``.
    """
    if not batch_ids or any(len(s) == 0 for s in batch_ids):
        raise ContractError("cannot encode an empty sequence")
    table = params[prefix + "tok_emb"]
    vocab_size = table.shape[0]
    ids, mask = pad_batch(batch_ids)
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ContractError(f"token id outside vocabulary of size {vocab_size}")
    B, T = ids.shape
    if T > config.max_len:
        raise ContractError(f"sequence length {T} exceeds max_len {config.max_len}")
    x = F.take(table, ids.reshape(-1))
    x = F.reshape(x, (B, T, config.dim))
    pos = F.take(params[prefix + "pos_emb"], np.arange(T))
    x = F.layer_norm(F.add(x, pos), params[prefix + "emb_ln.g"], params[prefix + "emb_ln.b"])
    x = F.dropout(x, config.dropout, rng)
    layers = [x]
    for i in range(config.layers):
        x = transformer_layer(x, params, f"{prefix}layer{i}.", config.heads, mask,
                              config.dropout, rng)
        layers.append(x)
    return layers, mask


def encode(ids: Sequence[int], params: Mapping, config: EncoderConfig,
           prefix: str = "encoder.") -> list[Tensor]:
    """Encode one sequence; returns ``layers + 1`` tensors of shape [len, d]."""
    layers, _ = encode_batch([list(ids)], params, config, prefix)
    T = len(ids)
    return [F.reshape(h, (T, config.dim)) for h in layers]


def _masked_mean(h: Tensor, mask: np.ndarray) -> Tensor:
    weights = mask / mask.sum(axis=1, keepdims=True)
    return F.sum(F.mul(h, weights[:, :, None]), axis=1)


def pool(layers: Sequence[Tensor], method: str, params: Mapping | None = None,
         mask: np.ndarray | None = None, prefix: str = "encoder.") -> Tensor:
    """Collapse per-token outputs into one sentence vector per sequence.

    Accepts batched layers [B,T,d] (with ``mask``) or single-sequence layers
    [T,d]; returns [B,d] or [d] respectively.
    """
    if method not in POOLING_METHODS:
        raise ConfigError(f"unknown pooling method {method!r}; expected one of {POOLING_METHODS}")
    single = layers[0].ndim == 2
    if single:
        T, d = layers[0].shape
        layers = [F.reshape(h, (1, T, d)) for h in layers]
        mask = np.ones((1, T), dtype=bool)
    elif mask is None:
        mask = np.ones(layers[0].shape[:2], dtype=bool)
    B, T, d = layers[-1].shape

    def cls_token(h):
        return F.reshape(F.take(F.reshape(h, (B * T, d)), np.arange(B) * T), (B, d))

    if method == "cls":
        if params is None:
            raise ContractError("cls pooling needs the pooler parameters")
        out = F.tanh(F.linear(cls_token(layers[-1]), params[prefix + "pooler.w"],
                              params[prefix + "pooler.b"]))
    elif method == "cls_wom":
        out = cls_token(layers[-1])
    elif method == "avg":
        out = _masked_mean(layers[-1], mask)
    else:
        if method == "first_last_avg":
            a, b = layers[0], layers[-1]
        else:
            if len(layers) < 3:
                raise ConfigError("top2_avg needs at least two encoder layers")
            a, b = layers[-2], layers[-1]
        out = _masked_mean(F.mul(F.add(a, b), 0.5), mask)
    return F.reshape(out, (d,)) if single else out


@dataclass
class SentenceEmbedding:
    vector: Tensor
    source: str  # "tweet" | "location"
    pooling: str

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]


def embed_texts(texts: Iterable[str], vocab: Vocabulary, params: Mapping,
                config: EncoderConfig, pooling: str, prefix: str = "encoder.",
                rng: np.random.Generator | None = None) -> Tensor:
    ids = [tokenize(t, vocab, config.max_len) for t in texts]
    return embed_ids(ids, params, config, pooling, prefix, rng)


def embed_ids(batch_ids: Sequence[Sequence[int]], params: Mapping, config: EncoderConfig,
              pooling: str, prefix: str = "encoder.",
              rng: np.random.Generator | None = None) -> Tensor:
    layers, mask = encode_batch(batch_ids, params, config, prefix, rng)
    return pool(layers, pooling, params, mask, prefix)
