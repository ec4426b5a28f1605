"""Inference over the full location set and the accuracy / distance metrics."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import LocationRecord, Post, compose_tweet_input
from .errors import ContractError, DataError
from .objectives import tlc_probabilities

EARTH_RADIUS_KM = 6371.0


@dataclass
class PredictionSet:
    post_ids: list[str]
    location_ids: list[int]   # class index -> location_id
    ranking: np.ndarray       # [n, K] class indices, best first
    scores: np.ndarray        # [n, K] contrastive probabilities, by class index

    @property
    def top1(self) -> dict[str, int]:
        return {pid: self.location_ids[r[0]] for pid, r in zip(self.post_ids, self.ranking)}

    def ranked_ids(self, i: int) -> list[int]:
        return [self.location_ids[j] for j in self.ranking[i]]


@dataclass
class MetricsReport:
    accuracy: float
    mean_dist: float
    med_dist: float
    count: int
    per_category: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_category"] = {str(k): v for k, v in self.per_category.items()}
        return d


def rank_scores(scores: np.ndarray) -> np.ndarray:
    """Column indices sorted by descending score, lower index first on ties."""
    scores = np.asarray(scores)
    cols = np.broadcast_to(np.arange(scores.shape[1]), scores.shape)
    return np.lexsort((cols, -scores), axis=1)


def predict(posts: Sequence[Post], model, locations: Sequence[LocationRecord] | None = None,
            batch_size: int = 256) -> PredictionSet:
    """Rank every location for every post by contrastive probability."""
    if locations is not None:
        expected = [loc.location_id for loc in model.locations]
        if sorted(loc.location_id for loc in locations) != expected:
            raise DataError("location set differs from the one the model was trained on")
    if model.num_locations == 0:
        raise DataError("cannot predict with an empty location set")
    params = model.params
    loc_embs = model.location_embeddings(params)
    cfg = model.config.tlc_config()
    chunks = []
    for start in range(0, len(posts), batch_size):
        ids = [model.tokenize(compose_tweet_input(p)) for p in posts[start:start + batch_size]]
        tweets = model.tweet_embeddings(params, ids)
        chunks.append(tlc_probabilities(tweets, loc_embs, cfg).probs.data)
    K = model.num_locations
    scores = np.concatenate(chunks) if chunks else np.zeros((0, K))
    return PredictionSet([p.id for p in posts], [loc.location_id for loc in model.locations],
                         rank_scores(scores), scores)


def haversine_km(a, b) -> float:
    """Great-circle distance in km between two (lat, lon) pairs in degrees."""
    (lat1, lon1), (lat2, lon2) = a, b
    for lat, lon in (a, b):
        if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
            raise DataError(f"coordinates out of range: ({lat}, {lon})")
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlmb = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def compute_metrics(predictions: Mapping[str, int], truths: Mapping[str, int],
                    locations: Sequence[LocationRecord]) -> MetricsReport:
    """Accuracy plus mean/median great-circle error over the posts in ``truths``."""
    coords = {loc.location_id: (loc.lat, loc.lon) for loc in locations}
    if not truths:
        raise DataError("no posts to evaluate")
    missing = [pid for pid in truths if pid not in predictions]
    if missing:
        raise ContractError(f"{len(missing)} posts have no prediction (e.g. {missing[0]!r})")
    dists, hits = [], []
    per_cat: dict[int, list[bool]] = defaultdict(list)
    for pid, truth in truths.items():
        pred = predictions[pid]
        ok = pred == truth
        hits.append(ok)
        per_cat[truth].append(ok)
        dists.append(0.0 if ok else haversine_km(coords[pred], coords[truth]))
    d = np.asarray(dists)
    return MetricsReport(
        accuracy=float(np.mean(hits)),
        mean_dist=float(d.mean()),
        med_dist=float(np.median(d)),
        count=len(d),
        per_category={k: float(np.mean(v)) for k, v in sorted(per_cat.items())},
    )


def evaluate(posts: Sequence[Post], model) -> MetricsReport:
    preds = predict(posts, model)
    return compute_metrics(preds.top1, {p.id: p.location_id for p in posts}, model.locations)


def majority_baseline(train_labels, eval_labels) -> float:
    """Accuracy of always predicting the most frequent training class.

    When several classes tie for most frequent (as in balanced few-shot
    sets) the accuracy is averaged over the tied classes.
    """
    counts = Counter(train_labels)
    if not counts or len(eval_labels) == 0:
        raise DataError("majority baseline needs training and evaluation labels")
    top = max(counts.values())
    tied = [c for c, n in counts.items() if n == top]
    eval_counts = Counter(eval_labels)
    return float(np.mean([eval_counts[c] for c in tied]) / len(eval_labels))
