"""Joint tweet-location representations for the matching objective.

Three ways to combine a tweet vector ``t`` with a location vector ``l``:

* ``ca``     -- cross-attention, tweet as query and location as key/value,
                added back onto the tweet (residual).
* ``sum``    -- ``t + l`` fed through a fusion encoder.
* ``concat`` -- ``[t; l]`` fed through a fusion encoder, then an affine map
                from 2d back to d.

Fusion encoders: ``mha`` (multi-head self-attention), ``bna`` (bottleneck
adapter with residual), ``mlp`` (two affine layers with GELU) and ``te``
(one transformer encoder layer).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as F
from .encoder import init_attention, init_transformer_layer, multi_head_attention, transformer_layer
from .errors import ConfigError, ShapeError
from .tensor import Tensor

FUSION_TYPES = ("ca", "sum", "concat")
ENCODER_KINDS = ("mha", "bna", "mlp", "te")
PREFIX = "fusion."

# All nine grid cells: CA alone plus {sum, concat} x four encoders.
FUSION_GRID = [("ca", None)] + [(t, k) for t in ("sum", "concat") for k in ENCODER_KINDS]


@dataclass(frozen=True)
class FusionConfig:
    fusion_type: str = "sum"
    encoder_kind: str | None = "mlp"
    bottleneck: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.fusion_type not in FUSION_TYPES:
            raise ConfigError(f"unknown fusion type {self.fusion_type!r}")
        if self.fusion_type == "ca":
            if self.encoder_kind is not None:
                raise ConfigError("ca fusion takes no fusion encoder")
        elif self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown fusion encoder {self.encoder_kind!r}")
        if self.bottleneck < 1 or self.heads < 1:
            raise ConfigError("bottleneck ratio and heads must be positive")

    @property
    def label(self) -> str:
        return self.fusion_type if self.encoder_kind is None else f"{self.fusion_type}+{self.encoder_kind}"

    def to_dict(self):
        return asdict(self)


def _gauss(rng, *shape):
    return rng.normal(0.0, 0.02, size=shape)


def _encoder_dim(cfg: FusionConfig, d: int) -> int:
    """Width the fusion encoder sees per token."""
    if cfg.fusion_type == "concat" and cfg.encoder_kind in ("bna", "mlp"):
        return 2 * d
    return d


def init_fusion(cfg: FusionConfig, d: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if cfg.fusion_type == "ca":
        if d % cfg.heads:
            raise ConfigError(f"dim {d} not divisible by {cfg.heads} heads")
        return init_attention(rng, d, PREFIX + "ca.")
    width = _encoder_dim(cfg, d)
    p: dict[str, np.ndarray] = {}
    kind = cfg.encoder_kind
    enc = PREFIX + kind + "."
    if kind in ("mha", "te") and width % cfg.heads:
        raise ConfigError(f"dim {width} not divisible by {cfg.heads} heads")
    if kind == "mha":
        p.update(init_attention(rng, width, enc))
    elif kind == "te":
        p.update(init_transformer_layer(rng, width, 4 * width, enc))
    elif kind == "bna":
        hidden = max(1, width // cfg.bottleneck)
        p[enc + "down.w"] = _gauss(rng, width, hidden)
        p[enc + "down.b"] = np.zeros(hidden)
        # zero up-projection: the adapter starts as the identity
        p[enc + "up.w"] = np.zeros((hidden, width))
        p[enc + "up.b"] = np.zeros(width)
    else:
        p[enc + "w1"] = _gauss(rng, width, width)
        p[enc + "b1"] = np.zeros(width)
        p[enc + "w2"] = _gauss(rng, width, width)
        p[enc + "b2"] = np.zeros(width)
    if cfg.fusion_type == "concat":
        p[PREFIX + "restore.w"] = _gauss(rng, 2 * d, d)
        p[PREFIX + "restore.b"] = np.zeros(d)
    return p


def encoder_forward(x: Tensor, kind: str, params: Mapping, heads: int = 4,
                    prefix: str | None = None) -> Tensor:
    """Apply one fusion encoder to ``x`` of shape [n, T, w]; output keeps the shape."""
    if kind not in ENCODER_KINDS:
        raise ConfigError(f"unknown fusion encoder {kind!r}")
    enc = prefix if prefix is not None else PREFIX + kind + "."
    if kind == "mha":
        return multi_head_attention(x, x, params, enc, heads)
    if kind == "te":
        return transformer_layer(x, params, enc, heads)
    if kind == "bna":
        h = F.gelu(F.linear(x, params[enc + "down.w"], params[enc + "down.b"]))
        return F.add(x, F.linear(h, params[enc + "up.w"], params[enc + "up.b"]))
    h = F.gelu(F.linear(x, params[enc + "w1"], params[enc + "b1"]))
    return F.linear(h, params[enc + "w2"], params[enc + "b2"])


def fuse(tweet: Tensor, loc: Tensor, cfg: FusionConfig, params: Mapping) -> Tensor:
    """Joint vectors for aligned rows of ``tweet`` and ``loc`` ([n,d] each, or [d])."""
    single = tweet.ndim == 1
    if single:
        tweet = F.reshape(tweet, (1, tweet.shape[0]))
        loc = F.reshape(loc, (1, loc.shape[0]))
    if tweet.shape != loc.shape or tweet.ndim != 2:
        raise ShapeError(f"fusion inputs must share shape [n,d], got {tweet.shape} and {loc.shape}")
    n, d = tweet.shape
    if cfg.fusion_type == "ca":
        q = F.reshape(tweet, (n, 1, d))
        kv = F.reshape(loc, (n, 1, d))
        out = F.add(tweet, F.reshape(multi_head_attention(q, kv, params, PREFIX + "ca.", cfg.heads), (n, d)))
    elif cfg.fusion_type == "sum":
        x = F.reshape(F.add(tweet, loc), (n, 1, d))
        out = F.reshape(encoder_forward(x, cfg.encoder_kind, params, cfg.heads), (n, d))
    else:
        if cfg.encoder_kind in ("mha", "te"):
            seq = F.concat([F.reshape(tweet, (n, 1, d)), F.reshape(loc, (n, 1, d))], axis=1)
            h = F.reshape(encoder_forward(seq, cfg.encoder_kind, params, cfg.heads), (n, 2 * d))
        else:
            x = F.reshape(F.concat([tweet, loc], axis=-1), (n, 1, 2 * d))
            h = F.reshape(encoder_forward(x, cfg.encoder_kind, params, cfg.heads), (n, 2 * d))
        out = F.linear(h, params[PREFIX + "restore.w"], params[PREFIX + "restore.b"])
    return F.reshape(out, (d,)) if single else out
