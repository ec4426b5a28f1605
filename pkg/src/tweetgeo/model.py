"""Parameter bundle tying encoder(s), fusion and matching head together."""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import encoder as enc
from .config import TrainConfig, Variant
from .data import LocationRecord, compose_location_input
from .errors import CheckpointError, ConfigError
from .fusion import init_fusion
from .objectives import init_head
from .tensor import Tensor

TWEET_PREFIX = "encoder."
LOCATION_PREFIX = "loc_encoder."
CHECKPOINT_VERSION = 1


@dataclass
class GeoModel:
    config: TrainConfig
    vocab: enc.Vocabulary
    locations: list[LocationRecord]
    params: dict[str, np.ndarray]
    train_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [loc.location_id for loc in self.locations]
        if ids != sorted(ids):
            raise ConfigError("locations must be sorted by location_id")
        self._location_ids = None

    @classmethod
    def initialize(cls, config: TrainConfig, vocab: enc.Vocabulary,
                   locations: Sequence[LocationRecord], seed: int | Sequence[int] = 0) -> "GeoModel":
        if not locations:
            raise ConfigError("a model needs at least one location")
        rng = np.random.default_rng(seed)
        ecfg = config.encoder_config()
        params = enc.init_encoder(ecfg, len(vocab), rng, TWEET_PREFIX)
        if config.has(Variant.DUAL_ENCODER):
            params.update(enc.init_encoder(ecfg, len(vocab), rng, LOCATION_PREFIX))
        if config.use_tlm:
            params.update(init_fusion(config.fusion_config(), config.dim, rng))
            params.update(init_head(config.dim, rng))
        locs = sorted(locations, key=lambda loc: loc.location_id)
        return cls(config, vocab, locs, params)

    # -- structure ---------------------------------------------------------

    @property
    def num_locations(self) -> int:
        return len(self.locations)

    @property
    def location_prefix(self) -> str:
        return LOCATION_PREFIX if self.config.has(Variant.DUAL_ENCODER) else TWEET_PREFIX

    def encoder_names(self) -> list[str]:
        return [k for k in self.params if k.startswith((TWEET_PREFIX, LOCATION_PREFIX))]

    def trainable_names(self) -> list[str]:
        if self.config.has(Variant.FROZEN_ENCODER):
            frozen = set(self.encoder_names())
            return [k for k in self.params if k not in frozen]
        return list(self.params)

    def parameter_count(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix)))

    def class_index(self) -> dict[int, int]:
        return {loc.location_id: i for i, loc in enumerate(self.locations)}

    # -- forward helpers ---------------------------------------------------

    def tokenize(self, text: str) -> list[int]:
        return enc.tokenize(text, self.vocab, self.config.max_len)

    def location_token_ids(self) -> list[list[int]]:
        if self._location_ids is None:
            self._location_ids = [
                self.tokenize(compose_location_input(loc, self.config.template)) for loc in self.locations]
        return self._location_ids

    def tweet_embeddings(self, params: Mapping, batch_ids, rng=None) -> Tensor:
        return enc.embed_ids(batch_ids, params, self.config.encoder_config(), self.config.pooling,
                             TWEET_PREFIX, rng)

    def location_embeddings(self, params: Mapping, rng=None) -> Tensor:
        return enc.embed_ids(self.location_token_ids(), params, self.config.encoder_config(),
                             self.config.pooling, self.location_prefix, rng)

    def copy(self) -> "GeoModel":
        return GeoModel(self.config, self.vocab, list(self.locations),
                        {k: v.copy() for k, v in self.params.items()}, list(self.train_ids))

    # -- checkpoint --------------------------------------------------------

    def save(self, path):
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "vocab": self.vocab.tokens,
            "locations": [loc.to_record() for loc in self.locations],
            "train_ids": self.train_ids,
            "param_names": list(self.params),
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "GeoModel":
        try:
            with np.load(path, allow_pickle=False) as z:
                meta = json.loads(str(z["meta"][()]))
                params = {k: z[f"param/{k}"].copy() for k in meta["param_names"]}
        except FileNotFoundError:
            raise CheckpointError(f"checkpoint not found: {path}") from None
        except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        config = TrainConfig.from_dict(meta["config"])
        locations = [LocationRecord(**rec) for rec in meta["locations"]]
        return cls(config, enc.Vocabulary(meta["vocab"]), locations, params, meta["train_ids"])
