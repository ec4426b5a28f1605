"""Corpus ingestion, input composition, splitting and few-shot sampling.

Corpora are two JSON-lines files; see ``docs/corpus_format.md``.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import CorpusParseError, DataError, IntegrityError, TemplateError

CLASS_MARKER = "[CLASS]"
DEFAULT_TEMPLATE = "a post of location [CLASS]."
SEPARATOR = " [SEP] "
SHOT_SETTINGS = (1, 2, 4, 6, 8, 10, 12, 14, 16)
# 8.5 : 0.2 : 1.3, in hundredths to keep the floors exact
SPLIT_PARTS = (85, 2, 13)
MIN_CATEGORY_COUNT = 30

PROMPT_TEMPLATES = (
    "a post of location [CLASS].",
    "a post of [CLASS].",
    "a post of location [CLASS], in Melbourne.",
    "This post is about location [CLASS].",
    "This post is about a location [CLASS].",
    "This post is about the location [CLASS].",
    "This post is about the place [CLASS].",
    "This post is about location [CLASS], in Melbourne.",
    "[CLASS]",
)

POST_FIELDS = ("id", "text", "user_description", "user_hometown", "source", "timestamp", "location_id")
LOCATION_FIELDS = ("location_id", "name", "lat", "lon")


@dataclass(frozen=True)
class Post:
    id: str
    text: str
    location_id: int
    user_description: str = ""
    user_hometown: str = ""
    source: str = ""
    timestamp: str = ""

    def to_record(self) -> dict:
        return {name: getattr(self, name) for name in POST_FIELDS}


@dataclass(frozen=True)
class LocationRecord:
    location_id: int
    name: str
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise DataError(f"location {self.location_id} has out-of-range coordinates")

    def to_record(self) -> dict:
        return {name: getattr(self, name) for name in LOCATION_FIELDS}


@dataclass(frozen=True)
class FewShotSpec:
    shots: int = 16
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.shots not in SHOT_SETTINGS:
            raise DataError(f"shots must be one of {SHOT_SETTINGS}, got {self.shots}")
        if not self.seeds:
            raise DataError("need at least one iteration seed")


@dataclass
class DatasetSplit:
    train: dict[int, list[str]] = field(default_factory=dict)
    dev: dict[int, list[str]] = field(default_factory=dict)
    test: dict[int, list[str]] = field(default_factory=dict)

    def ids(self, part: str) -> list[str]:
        groups = getattr(self, part)
        return [pid for loc in sorted(groups) for pid in groups[loc]]


# ---------------------------------------------------------------------------
# ingestion


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusParseError(path, lineno, "record is not an object")
            yield lineno, rec


def _parse_location(path, lineno, rec) -> LocationRecord:
    missing = [f for f in LOCATION_FIELDS if f not in rec]
    if missing:
        raise CorpusParseError(path, lineno, f"missing fields {missing}")
    try:
        return LocationRecord(int(rec["location_id"]), str(rec["name"]),
                              float(rec["lat"]), float(rec["lon"]))
    except (TypeError, ValueError) as exc:
        raise CorpusParseError(path, lineno, str(exc)) from None
    except DataError as exc:
        raise CorpusParseError(path, lineno, str(exc)) from None


def _parse_post(path, lineno, rec) -> Post:
    for f in ("id", "location_id"):
        if f not in rec:
            raise CorpusParseError(path, lineno, f"missing field {f!r}")
    try:
        loc = int(rec["location_id"])
    except (TypeError, ValueError):
        raise CorpusParseError(path, lineno, "location_id is not an integer") from None
    text_fields = {}
    for f in ("text", "user_description", "user_hometown", "source", "timestamp"):
        v = rec.get(f) or ""
        if not isinstance(v, str):
            raise CorpusParseError(path, lineno, f"field {f!r} must be a string")
        text_fields[f] = v
    return Post(id=str(rec["id"]), location_id=loc, **text_fields)


def load_locations(path) -> list[LocationRecord]:
    locations, names = {}, set()
    for lineno, rec in _read_jsonl(path):
        loc = _parse_location(path, lineno, rec)
        if loc.location_id in locations:
            raise CorpusParseError(path, lineno, f"duplicate location_id {loc.location_id}")
        if loc.name in names:
            raise CorpusParseError(path, lineno, f"duplicate location name {loc.name!r}")
        locations[loc.location_id] = loc
        names.add(loc.name)
    return [locations[k] for k in sorted(locations)]


def load_corpus(posts_path, locations_path, min_count: int = MIN_CATEGORY_COUNT
                ) -> tuple[list[Post], list[LocationRecord]]:
    """Read and validate a corpus, dropping categories with too few posts."""
    locations = load_locations(locations_path)
    known = {loc.location_id for loc in locations}
    posts, seen = [], set()
    for lineno, rec in _read_jsonl(posts_path):
        post = _parse_post(posts_path, lineno, rec)
        if post.id in seen:
            raise CorpusParseError(posts_path, lineno, f"duplicate post id {post.id!r}")
        if post.location_id not in known:
            raise IntegrityError(
                f"{posts_path}:{lineno}: post {post.id!r} references unknown location_id {post.location_id}")
        seen.add(post.id)
        posts.append(post)
    counts = Counter(p.location_id for p in posts)
    keep = {k for k, n in counts.items() if n >= min_count}
    return ([p for p in posts if p.location_id in keep],
            [loc for loc in locations if loc.location_id in keep])


def load_corpus_dir(directory, min_count: int = MIN_CATEGORY_COUNT):
    directory = Path(directory)
    return load_corpus(directory / "posts.jsonl", directory / "locations.jsonl", min_count)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# input composition


def compose_tweet_input(post: Post) -> str:
    parts = (post.text, post.user_description, post.user_hometown, post.source, post.timestamp)
    return SEPARATOR.join(p.strip() for p in parts if p and p.strip())


def compose_location_input(loc: LocationRecord | str, template: str = DEFAULT_TEMPLATE) -> str:
    name = loc.name if isinstance(loc, LocationRecord) else loc
    n = template.count(CLASS_MARKER)
    if n != 1:
        raise TemplateError(f"template must contain {CLASS_MARKER} exactly once, found {n}")
    return template.replace(CLASS_MARKER, name)


# ---------------------------------------------------------------------------
# splitting and sampling


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = n * SPLIT_PARTS[0] // 100
    n_dev = n * SPLIT_PARTS[1] // 100
    return n_train, n_dev, n - n_train - n_dev


def split_dataset(posts, seed: int = 0) -> DatasetSplit:
    """Per-category shuffle and contiguous 85/2/13 cut (floors, remainder to test)."""
    by_loc: dict[int, list[str]] = defaultdict(list)
    for p in posts:
        by_loc[p.location_id].append(p.id)
    rng = np.random.default_rng(seed)
    split = DatasetSplit()
    for loc in sorted(by_loc):
        ids = sorted(by_loc[loc])
        order = rng.permutation(len(ids))
        ids = [ids[i] for i in order]
        n_train, n_dev, _ = split_counts(len(ids))
        split.train[loc] = ids[:n_train]
        split.dev[loc] = ids[n_train:n_train + n_dev]
        split.test[loc] = ids[n_train + n_dev:]
    return split


def sample_few_shot(split: DatasetSplit, spec: FewShotSpec) -> list[list[str]]:
    """One S-per-category training id list per iteration seed."""
    for loc in sorted(split.train):
        if len(split.train[loc]) < spec.shots:
            raise DataError(
                f"category {loc} has {len(split.train[loc])} training posts, fewer than {spec.shots} shots")
    out = []
    for seed in spec.seeds:
        rng = np.random.default_rng(seed)
        chosen = []
        for loc in sorted(split.train):
            pool = split.train[loc]
            idx = rng.choice(len(pool), size=spec.shots, replace=False)
            chosen.extend(pool[i] for i in sorted(idx))
        out.append(chosen)
    return out


# ---------------------------------------------------------------------------
# synthetic corpus

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "ch", "kr", "sh", "st", "tr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_PLACE_KINDS = ("Street", "Park", "Station", "Market", "Square", "Lane", "Gardens", "Pier",
                "Arcade", "Wharf", "Hill", "Plaza")
_SOURCES = ("iphone", "android", "web", "instagram", "ipad", "foursquare")
# bounding box loosely modelled on a city centre
CITY_BBOX = (-37.90, 144.85, -37.70, 145.10)

THEME_SIZE = 20
BACKGROUND_SIZE = 500
THEME_SHARE = 0.7


def _words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < count:
        n_syl = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(n_syl))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def zipf_weights(k: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, k + 1) ** skew
    return w / w.sum()


def generate_synthetic_corpus(num_locations: int, num_posts: int, skew: float = 1.0,
                              seed: int = 0) -> tuple[list[Post], list[LocationRecord]]:
    """Long-tailed toy corpus: location 0 is the most popular.

    Each location owns a 20-word theme vocabulary; post bodies mix 70% theme
    words with 30% words from a shared 500-word background pool.
    """
    if num_locations < 2:
        raise DataError("need at least two locations")
    if num_posts < 1:
        raise DataError("need at least one post")
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    name_words = _words(rng, num_locations, taken)
    themes = [_words(rng, THEME_SIZE, taken) for _ in range(num_locations)]
    background = _words(rng, BACKGROUND_SIZE, taken)
    hometowns = [_words(rng, 3, taken) for _ in range(num_locations)]
    bios = [_words(rng, 6, taken) for _ in range(num_locations)]

    lat0, lon0, lat1, lon1 = CITY_BBOX
    side = math.ceil(math.sqrt(num_locations))
    locations = []
    for i in range(num_locations):
        r, c = divmod(i, side)
        lat = lat0 + (r + 0.5 + rng.uniform(-0.3, 0.3)) * (lat1 - lat0) / side
        lon = lon0 + (c + 0.5 + rng.uniform(-0.3, 0.3)) * (lon1 - lon0) / side
        kind = _PLACE_KINDS[i % len(_PLACE_KINDS)]
        locations.append(LocationRecord(i, f"{name_words[i].capitalize()} {kind}",
                                        round(lat, 6), round(lon, 6)))

    sources = [[_SOURCES[j] for j in rng.choice(len(_SOURCES), size=2, replace=False)]
               for _ in range(num_locations)]
    labels = rng.choice(num_locations, size=num_posts, p=zipf_weights(num_locations, skew))
    start = datetime(2019, 1, 1)
    posts = []
    for n, loc in enumerate(labels):
        loc = int(loc)
        length = int(rng.integers(8, 21))
        from_theme = rng.random(length) < THEME_SHARE
        words = [themes[loc][rng.integers(THEME_SIZE)] if t else background[rng.integers(BACKGROUND_SIZE)]
                 for t in from_theme]
        desc = " ".join(bios[loc][j] for j in rng.choice(6, size=2, replace=False))
        when = start + timedelta(minutes=int(rng.integers(0, 365 * 24 * 60)))
        posts.append(Post(
            id=f"p{n:07d}",
            text=" ".join(words),
            location_id=loc,
            user_description=desc if rng.random() < 0.8 else "",
            user_hometown=hometowns[loc][rng.integers(3)] if rng.random() < 0.6 else "",
            source=sources[loc][rng.integers(2)],
            timestamp=when.strftime("%Y-%m-%dT%H:%M:%S"),
        ))
    return posts, locations


def write_corpus(directory, posts, locations) -> tuple[Path, Path]:
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    posts_path = directory / "posts.jsonl"
    locations_path = directory / "locations.jsonl"
    write_jsonl(posts_path, (p.to_record() for p in posts))
    write_jsonl(locations_path, (loc.to_record() for loc in locations))
    return posts_path, locations_path
