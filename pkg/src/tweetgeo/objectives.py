"""Tweet-location contrastive and matching losses.

The contrastive loss scores every tweet in a batch against the whole set of
K locations.  The matching loss classifies one positive pair against M hard
negatives picked from the contrastive probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as F
from .errors import ConfigError, ContractError, DataError
from .fusion import FusionConfig, fuse
from .tensor import Tensor

POLICIES = ("multinomial", "top")
HEAD_PREFIX = "head."


@dataclass(frozen=True)
class TLCConfig:
    temperature: float = 0.05
    smoothing: float = 0.1
    use_smoothing: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("label smoothing must lie in [0, 1)")

    @property
    def effective_smoothing(self) -> float:
        return self.smoothing if self.use_smoothing else 0.0


@dataclass(frozen=True)
class HardNegativeSpec:
    count: int = 7
    policy: str = "top"
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown hard-negative policy {self.policy!r}")
        if self.count < 1:
            raise ConfigError("need at least one hard negative")

    def check(self, num_locations: int):
        if self.count > num_locations - 1:
            raise ConfigError(
                f"{self.count} hard negatives requested but only {num_locations - 1} "
                "non-truth locations exist")


@dataclass
class SimilarityMatrix:
    probs: Tensor   # [N, K], rows sum to 1
    cosine: Tensor  # [N, K], raw cosine similarities

    @property
    def shape(self):
        return self.probs.shape


@dataclass
class MatchBatch:
    candidates: np.ndarray  # [N, M+1] location indices, truth in column 0
    targets: np.ndarray     # [N, M+1] one-hot on column 0
    probs: Tensor           # [N, M+1] head output after softmax


def tlc_probabilities(tweet_embs: Tensor, loc_embs: Tensor, cfg: TLCConfig) -> SimilarityMatrix:
    """Temperature-scaled softmax over cosine similarities, per tweet row."""
    cos = F.cosine_similarity_matrix(tweet_embs, loc_embs)
    return SimilarityMatrix(F.softmax(F.mul(cos, 1.0 / cfg.temperature), axis=-1), cos)


def smoothed_targets(labels, num_classes: int, smoothing: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label outside [0, {num_classes})")
    y = np.full((labels.size, num_classes), smoothing / num_classes)
    y[np.arange(labels.size), labels] += 1.0 - smoothing
    return y


def tlc_loss(sim: SimilarityMatrix, labels, cfg: TLCConfig) -> Tensor:
    K = sim.probs.shape[1]
    y = smoothed_targets(labels, K, cfg.effective_smoothing)
    return F.cross_entropy(sim.probs, y)


def mine_hard_negatives(scores, truth: int, spec: HardNegativeSpec,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Pick ``spec.count`` distinct non-truth locations for one tweet.

    ``scores`` is the tweet's contrastive probability row (any values that
    are monotone in similarity work for the ``top`` policy).  ``top`` takes
    the highest-scoring indices, lower index first on ties.  ``multinomial``
    draws without replacement from the row with the truth masked out and the
    rest re-normalized.
    """
    scores = np.asarray(scores, dtype=np.float64)
    K = scores.shape[0]
    spec.check(K)
    if not 0 <= truth < K:
        raise DataError(f"truth index {truth} outside [0, {K})")
    M = spec.count
    others = np.delete(np.arange(K), truth)
    if spec.policy == "top":
        order = np.lexsort((others, -scores[others]))
        return others[order[:M]]

    if rng is None:
        raise ContractError("multinomial mining needs a random generator")
    weights = np.clip(scores[others], 0.0, None)
    chosen = []
    remaining = np.ones(others.size, dtype=bool)
    for _ in range(M):
        live = np.flatnonzero(remaining & (weights > 0.0))
        u = rng.random()
        if live.size == 0:
            # everything left has zero mass: fall back to lowest index
            pick = int(np.flatnonzero(remaining)[0])
        else:
            w = weights[live]
            cdf = np.cumsum(w / w.sum())
            pick = int(live[min(int(np.searchsorted(cdf, u, side="right")), live.size - 1)])
        remaining[pick] = False
        chosen.append(others[pick])
    return np.asarray(chosen, dtype=np.int64)


def build_candidates(probs: np.ndarray, labels, spec: HardNegativeSpec,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Candidate matrix [N, M+1]: truth first, then mined negatives."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = [np.concatenate(([t], mine_hard_negatives(row, int(t), spec, rng)))
            for row, t in zip(probs, labels)]
    return np.asarray(rows, dtype=np.int64)


def init_head(d: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {HEAD_PREFIX + "w": rng.normal(0.0, 0.02, size=(d, 1)), HEAD_PREFIX + "b": np.zeros(1)}


def match_scores(joint: Tensor, params: Mapping) -> Tensor:
    """Shared d->1 head applied to every joint vector."""
    return F.linear(joint, params[HEAD_PREFIX + "w"], params[HEAD_PREFIX + "b"])


def tlm_loss(tweet_embs: Tensor, loc_embs: Tensor, labels, spec: HardNegativeSpec,
             fusion_cfg: FusionConfig, params: Mapping, *,
             sim: SimilarityMatrix | None = None, candidates: np.ndarray | None = None,
             rng: np.random.Generator | None = None) -> tuple[Tensor, MatchBatch]:
    """(M+1)-way matching loss with the truth location at position 0.

    Negatives come from ``candidates`` when given, otherwise they are mined
    from the detached contrastive probabilities in ``sim``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    N = tweet_embs.shape[0]
    K = loc_embs.shape[0]
    if candidates is None:
        if sim is None:
            raise ContractError("tlm_loss needs either candidates or a similarity matrix")
        spec.check(K)
        candidates = build_candidates(sim.probs.data, labels, spec, rng)
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.shape[0] != N or np.any(candidates[:, 0] != labels):
        raise ContractError("candidate rows must start with each tweet's truth location")
    width = candidates.shape[1]
    tweet_rows = F.take(tweet_embs, np.repeat(np.arange(N), width))
    loc_rows = F.take(loc_embs, candidates.reshape(-1))
    joint = fuse(tweet_rows, loc_rows, fusion_cfg, params)
    scores = F.reshape(match_scores(joint, params), (N, width))
    probs = F.softmax(scores, axis=-1)
    targets = np.zeros((N, width))
    targets[:, 0] = 1.0
    loss = F.cross_entropy(probs, targets)
    return loss, MatchBatch(candidates, targets, probs)


def total_loss(tlc: Tensor, tlm: Tensor | None) -> Tensor:
    """Unweighted sum of the two objectives; ``tlm=None`` means TLC only."""
    return tlc if tlm is None else F.add(tlc, tlm)
