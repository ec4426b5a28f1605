"""Flat run configuration shared by the trainer, the model and the CLI.

Config files are plain ``key = value`` lines whose keys are the
:class:`TrainConfig` field names; lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from enum import Enum

from .data import DEFAULT_TEMPLATE, FewShotSpec
from .encoder import POOLING_METHODS, EncoderConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .objectives import HardNegativeSpec, TLCConfig

PRETRAINED_FINETUNE_LR = 2e-5


class Variant(str, Enum):
    ONE_ENCODER = "one-encoder"
    DUAL_ENCODER = "dual-encoder"
    FROZEN_ENCODER = "frozen-encoder"
    NO_TLM = "no-tlm"
    NO_LABEL_SMOOTHING = "no-label-smoothing"


_STRUCTURAL = {Variant.ONE_ENCODER, Variant.DUAL_ENCODER, Variant.FROZEN_ENCODER}
_MODIFIERS = {Variant.NO_TLM, Variant.NO_LABEL_SMOOTHING}


def parse_variants(value) -> tuple[Variant, ...]:
    """Normalize ``"no-tlm+no-label-smoothing"`` style specs into a sorted tuple."""
    if isinstance(value, str):
        items = [v for v in value.replace(",", "+").split("+") if v.strip()]
    else:
        items = list(value)
    try:
        flags = {Variant(v.strip() if isinstance(v, str) else v) for v in items}
    except ValueError as exc:
        raise ConfigError(f"unknown variant: {exc}") from None
    structural = flags & _STRUCTURAL
    if len(structural) > 1:
        raise ConfigError(f"variants {sorted(v.value for v in structural)} are mutually exclusive")
    if flags & _MODIFIERS and structural - {Variant.ONE_ENCODER}:
        raise ConfigError("no-tlm / no-label-smoothing only combine with the one-encoder model")
    if not structural:
        flags.add(Variant.ONE_ENCODER)
    return tuple(sorted(flags, key=lambda v: v.value))


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 100
    eval_interval: int = 160
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    patience: int = 5
    # objectives
    temperature: float = 0.05
    smoothing: float = 0.1
    negatives: int = 7
    negative_policy: str = "top"
    # architecture
    pooling: str = "cls"
    fusion_type: str = "sum"
    fusion_encoder: str | None = "mlp"
    bottleneck: int = 4
    fusion_heads: int = 4
    layers: int = 2
    dim: int = 64
    heads: int = 4
    ff_dim: int = 256
    max_len: int = 64
    dropout: float = 0.0
    vocab_size: int = 8192
    template: str = DEFAULT_TEMPLATE
    variant: tuple[Variant, ...] = (Variant.ONE_ENCODER,)
    # data protocol
    shots: int = 16
    iterations: int = 3
    min_count: int = 30
    data_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", parse_variants(self.variant))
        if self.fusion_type == "ca":
            object.__setattr__(self, "fusion_encoder", None)
        for name in ("lr", "weight_decay", "adam_eps", "temperature"):
            if getattr(self, name) < 0 or (name != "weight_decay" and getattr(self, name) == 0):
                raise ConfigError(f"{name} must be positive")
        for name in ("batch_size", "max_epochs", "eval_interval", "patience", "iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.pooling not in POOLING_METHODS:
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        # construct the sub-configs once for validation
        self.encoder_config()
        self.fusion_config()
        self.tlc_config()
        self.negative_spec()
        self.few_shot_spec()

    # -- derived configs ---------------------------------------------------

    def has(self, flag: Variant) -> bool:
        return flag in self.variant

    @property
    def use_tlm(self) -> bool:
        return not self.has(Variant.NO_TLM)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.layers, self.dim, self.heads, self.ff_dim, self.max_len, self.dropout)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.fusion_type, self.fusion_encoder, self.bottleneck, self.fusion_heads)

    def tlc_config(self) -> TLCConfig:
        return TLCConfig(self.temperature, self.smoothing, not self.has(Variant.NO_LABEL_SMOOTHING))

    def negative_spec(self, seed: int | None = None) -> HardNegativeSpec:
        return HardNegativeSpec(self.negatives, self.negative_policy, self.seed if seed is None else seed)

    def few_shot_spec(self) -> FewShotSpec:
        return FewShotSpec(self.shots, tuple(self.data_seed + i for i in range(self.iterations)))

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = "+".join(v.value for v in self.variant)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in values.items()})


def _coerce(f: dataclasses.Field, value):
    if not isinstance(value, str):
        return value
    default = f.default
    text = value.strip()
    if f.name == "variant":
        return text
    if f.name == "fusion_encoder":
        return None if text.lower() in ("", "none", "null") else text
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {value!r}") from None
    return text


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (highest precedence).

    ``path`` is a ``key = value`` text file, or a JSON document (a run
    manifest or report) whose ``config`` object holds the values.
    """
    values: dict = {}
    if path not in (None, "", "default"):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        if str(path).endswith(".json"):
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from None
            doc = doc.get("config", doc) if isinstance(doc, dict) else None
            if not isinstance(doc, dict):
                raise ConfigError(f"config {path} has no config object")
            values.update(doc)
        else:
            values.update(parse_config_text(text))
    values.update(overrides or {})
    return TrainConfig.from_dict(values)
