"""Dataset ingestion, chronological splitting and item statistics.

MovieLens-1M layout (from the distribution README)::

    ratings.dat   UserID::MovieID::Rating::Timestamp
    movies.dat    MovieID::Title::Genres        (genres pipe-separated)

Amazon reviews are newline-delimited records. Both the 2014/2018 field names
(``reviewerID``, ``asin``, ``overall``, ``unixReviewTime``, ``reviewText``) and
the 2023 ones (``user_id``, ``parent_asin``, ``rating``, ``timestamp`` in ms,
``text``) are accepted.
"""

from __future__ import annotations

import ast
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping

from .errors import ConfigError, InsufficientHistoryError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_SPLIT_RATIO = 0.8
DEFAULT_HISTORY_WINDOW = 15


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: float
    timestamp: int
    review_text: str | None = None

    def to_record(self) -> dict:
        return {
            "user_id": self.user_id,
            "item_id": self.item_id,
            "rating": self.rating,
            "timestamp": self.timestamp,
            "review_text": self.review_text,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "Interaction":
        return cls(
            user_id=str(rec["user_id"]),
            item_id=str(rec["item_id"]),
            rating=float(rec["rating"]),
            timestamp=int(rec["timestamp"]),
            review_text=rec.get("review_text"),
        )


@dataclass(frozen=True)
class Item:
    item_id: str
    title: str
    genres: tuple[str, ...] = ()
    extra: Mapping[str, str] = field(default_factory=dict)
    # True when the title is a generated "unknown:<id>" stand-in.
    placeholder: bool = False

    def __post_init__(self):
        if not self.title:
            raise ValueError(f"item {self.item_id!r} has an empty title")
        object.__setattr__(self, "genres", tuple(self.genres))
        object.__setattr__(self, "extra", MappingProxyType(dict(self.extra)))

    def __hash__(self):
        return hash((self.item_id, self.title, self.genres, self.placeholder))

    def __eq__(self, other):
        if not isinstance(other, Item):
            return NotImplemented
        return (
            self.item_id == other.item_id
            and self.title == other.title
            and self.genres == other.genres
            and dict(self.extra) == dict(other.extra)
            and self.placeholder == other.placeholder
        )

    def to_record(self) -> dict:
        return {
            "item_id": self.item_id,
            "title": self.title,
            "genres": list(self.genres),
            "extra": dict(sorted(self.extra.items())),
            "placeholder": self.placeholder,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "Item":
        return cls(
            item_id=str(rec["item_id"]),
            title=rec["title"],
            genres=tuple(rec.get("genres", ())),
            extra=rec.get("extra", {}),
            placeholder=bool(rec.get("placeholder", False)),
        )


@dataclass
class Dataset:
    items: dict[str, Item]
    interactions_by_user: dict[str, list[Interaction]]
    rating_scale: tuple[float, float] = (1.0, 5.0)
    name: str = "dataset"
    # Lines/records skipped in lenient mode.
    skipped: int = 0

    def __post_init__(self):
        lo, hi = self.rating_scale
        for user, events in self.interactions_by_user.items():
            for ev in events:
                if ev.item_id not in self.items:
                    raise ValueError(f"interaction of user {user} references unknown item {ev.item_id}")
                if not lo <= ev.rating <= hi:
                    raise ValueError(f"rating {ev.rating} outside scale {self.rating_scale}")
                if ev.timestamp < 0:
                    raise ValueError(f"negative timestamp for user {user}")
            # sorted() is stable: equal timestamps keep file order
            self.interactions_by_user[user] = sorted(events, key=lambda e: e.timestamp)

    @property
    def n_interactions(self) -> int:
        return sum(len(v) for v in self.interactions_by_user.values())

    def category_vocabulary(self) -> list[str]:
        counts = Counter(g for it in self.items.values() for g in it.genres)
        return [g for g, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.items == other.items
            and self.interactions_by_user == other.interactions_by_user
            and tuple(self.rating_scale) == tuple(other.rating_scale)
        )


# ---------------------------------------------------------------- MovieLens

def _read_lines(path: Path, encoding: str) -> Iterator[tuple[int, str]]:
    with open(path, encoding=encoding, newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if line.strip():
                yield lineno, line


def parse_movielens(ratings_path, movies_path, *, strict: bool = True, name: str = "ml-1m") -> Dataset:
    """Parse ML-1M ``ratings.dat`` / ``movies.dat`` (ISO-8859-1)."""
    ratings_path, movies_path = Path(ratings_path), Path(movies_path)
    skipped = 0

    items: dict[str, Item] = {}
    for lineno, line in _read_lines(movies_path, "iso-8859-1"):
        parts = line.split("::")
        if len(parts) != 3 or not parts[0] or not parts[1]:
            if strict:
                raise ParseError(f"expected 3 '::'-separated fields, got {len(parts)}", lineno, str(movies_path))
            skipped += 1
            continue
        mid, title, genres = parts
        items[mid] = Item(mid, title, tuple(g for g in genres.split("|") if g))

    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for lineno, line in _read_lines(ratings_path, "iso-8859-1"):
        parts = line.split("::")
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 '::'-separated fields, got {len(parts)}")
            uid, mid, rating, ts = parts
            ev = Interaction(uid, mid, float(rating), int(ts))
            if mid not in items:
                raise ValueError(f"movie {mid} missing from {movies_path.name}")
            if not 1 <= ev.rating <= 5 or ev.timestamp < 0:
                raise ValueError("rating or timestamp out of range")
        except ValueError as exc:
            if strict:
                raise ParseError(str(exc), lineno, str(ratings_path)) from None
            skipped += 1
            continue
        by_user[uid].append(ev)

    if skipped:
        logger.warning("skipped %d malformed MovieLens lines", skipped)
    return Dataset(items, dict(by_user), (1.0, 5.0), name=name, skipped=skipped)


# ------------------------------------------------------------------ Amazon

_REVIEW_FIELDS = {
    "user_id": ("reviewerID", "user_id"),
    "item_id": ("asin", "parent_asin"),
    "rating": ("overall", "rating"),
}
_EXTRA_META = ("brand", "price", "store", "main_category")


def _load_record(line: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError:
        # the 2014 metadata dumps are Python literals, not JSON
        rec = ast.literal_eval(line)
    if not isinstance(rec, dict):
        raise ValueError("record is not an object")
    return rec


def _first(rec: dict, keys: Iterable[str]):
    for k in keys:
        if rec.get(k) not in (None, ""):
            return rec[k]
    return None


def _flatten_categories(value) -> list[str]:
    out: list[str] = []
    stack = [value]
    while stack:
        v = stack.pop(0)
        if isinstance(v, (list, tuple)):
            stack[0:0] = list(v)
        elif v:
            out.append(str(v))
    seen: dict[str, None] = {}
    for c in out:
        seen.setdefault(c, None)
    return list(seen)


def _review_timestamp(rec: dict) -> int:
    if rec.get("unixReviewTime") is not None:
        return int(rec["unixReviewTime"])
    if rec.get("timestamp") is not None:
        ts = int(rec["timestamp"])
        # 2023 release stores milliseconds
        return ts // 1000 if ts > 10**11 else ts
    raise ValueError("missing field unixReviewTime/timestamp")


def parse_amazon_reviews(reviews_path, metadata_path, *, strict: bool = True, name: str = "amazon") -> Dataset:
    reviews_path, metadata_path = Path(reviews_path), Path(metadata_path)
    skipped = 0

    items: dict[str, Item] = {}
    for lineno, line in _read_lines(metadata_path, "utf-8"):
        try:
            rec = _load_record(line)
            iid = _first(rec, ("parent_asin", "asin"))
            if iid is None:
                raise ValueError("missing field asin")
        except (ValueError, SyntaxError) as exc:
            if strict:
                raise ParseError(str(exc), lineno, str(metadata_path)) from None
            skipped += 1
            continue
        iid = str(iid)
        title = rec.get("title")
        cats = _flatten_categories(rec.get("categories") or rec.get("category") or [])
        extra = {k: str(rec[k]) for k in _EXTRA_META if rec.get(k) not in (None, "")}
        if title:
            items[iid] = Item(iid, str(title), tuple(cats), extra)
        else:
            items[iid] = Item(iid, f"unknown:{iid}", tuple(cats), extra, placeholder=True)

    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for lineno, line in _read_lines(reviews_path, "utf-8"):
        try:
            rec = _load_record(line)
            vals = {k: _first(rec, keys) for k, keys in _REVIEW_FIELDS.items()}
            missing = [k for k, v in vals.items() if v is None]
            if missing:
                raise ValueError(f"missing field(s) {', '.join(missing)}")
            ev = Interaction(
                str(vals["user_id"]),
                str(vals["item_id"]),
                float(vals["rating"]),
                _review_timestamp(rec),
                _first(rec, ("reviewText", "text")),
            )
            if not 1 <= ev.rating <= 5 or ev.timestamp < 0:
                raise ValueError("rating or timestamp out of range")
        except (ValueError, SyntaxError, TypeError) as exc:
            if strict:
                raise ParseError(str(exc), lineno, str(reviews_path)) from None
            skipped += 1
            continue
        if ev.item_id not in items:
            items[ev.item_id] = Item(ev.item_id, f"unknown:{ev.item_id}", placeholder=True)
        by_user[ev.user_id].append(ev)

    if skipped:
        logger.warning("skipped %d malformed Amazon records", skipped)
    return Dataset(items, dict(by_user), (1.0, 5.0), name=name, skipped=skipped)


# -------------------------------------------------- canonical interchange

def write_canonical(dataset: Dataset, directory) -> dict[str, Path]:
    """Write ``interactions.jsonl``, ``items.jsonl`` and ``meta.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "interactions": directory / "interactions.jsonl",
        "items": directory / "items.jsonl",
        "meta": directory / "meta.json",
    }
    with open(paths["interactions"], "w", encoding="utf-8", newline="\n") as fh:
        for events in dataset.interactions_by_user.values():
            for ev in events:
                fh.write(json.dumps(ev.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
    with open(paths["items"], "w", encoding="utf-8", newline="\n") as fh:
        for it in dataset.items.values():
            fh.write(json.dumps(it.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
    meta = {"name": dataset.name, "rating_scale": list(dataset.rating_scale)}
    paths["meta"].write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return paths


def read_canonical(directory) -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    items = {}
    for _, line in _read_lines(directory / "items.jsonl", "utf-8"):
        it = Item.from_record(json.loads(line))
        items[it.item_id] = it
    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for _, line in _read_lines(directory / "interactions.jsonl", "utf-8"):
        ev = Interaction.from_record(json.loads(line))
        by_user[ev.user_id].append(ev)
    return Dataset(items, dict(by_user), tuple(meta["rating_scale"]), name=meta["name"])


# ------------------------------------------------------------------ splits

@dataclass
class SplitDataset:
    dataset: Dataset
    train_by_user: dict[str, list[Interaction]]
    test_by_user: dict[str, list[Interaction]]
    split_ratio: float
    excluded_users: list[str] = field(default_factory=list)

    @property
    def items(self) -> dict[str, Item]:
        return self.dataset.items

    @property
    def users(self) -> list[str]:
        return list(self.train_by_user)

    def interacted(self, user: str) -> set[str]:
        return {e.item_id for e in self.train_by_user[user]} | {e.item_id for e in self.test_by_user[user]}

    def manifest(self) -> dict:
        return {
            "split_ratio": self.split_ratio,
            "users": {
                u: {"n_train": len(self.train_by_user[u]), "n_test": len(self.test_by_user[u])}
                for u in self.train_by_user
            },
            "excluded_users": list(self.excluded_users),
        }


def train_size(n: int, ratio: float) -> int:
    return max(1, math.floor(ratio * n))


def chronological_split(dataset: Dataset, ratio: float = DEFAULT_SPLIT_RATIO, min_interactions: int = 2) -> SplitDataset:
    """Per-user prefix split on the stable (timestamp, file order) ordering."""
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    train, test, excluded = {}, {}, []
    for user, events in dataset.interactions_by_user.items():
        n = len(events)
        if n < max(2, min_interactions):
            excluded.append(user)
            continue
        k = train_size(n, ratio)
        train[user] = events[:k]
        test[user] = events[k:]
    if excluded:
        logger.info("excluded %d users with too few interactions", len(excluded))
    return SplitDataset(dataset, train, test, ratio, excluded)


# ------------------------------------------------------------- item stats

@dataclass
class ItemStats:
    popularity: dict[str, int]
    mean_rating: dict[str, float]
    popularity_quantile: dict[str, float]
    # items with no train interactions (mean rating is the global fallback)
    unseen: frozenset[str] = frozenset()
    global_mean: float = 0.0


def compute_item_stats(split: SplitDataset) -> ItemStats:
    pops: Counter = Counter()
    sums: dict[str, float] = defaultdict(float)
    for events in split.train_by_user.values():
        for ev in events:
            pops[ev.item_id] += 1
            sums[ev.item_id] += ev.rating
    total = sum(pops.values())
    if not split.items:
        return ItemStats({}, {}, {})
    global_mean = sum(sums.values()) / total if total else 0.0

    popularity = {iid: pops.get(iid, 0) for iid in split.items}
    mean_rating = {
        iid: (sums[iid] / pops[iid]) if pops.get(iid) else global_mean for iid in split.items
    }
    unseen = frozenset(iid for iid, p in popularity.items() if p == 0)

    # rank = number of items strictly less popular, so ties share the lower rank
    ordered = sorted(popularity.values())
    n = len(ordered)
    first_rank: dict[int, int] = {}
    for idx, value in enumerate(ordered):
        first_rank.setdefault(value, idx)
    quantile = {
        iid: (first_rank[p] / (n - 1)) if n > 1 else 0.0 for iid, p in popularity.items()
    }
    return ItemStats(popularity, mean_rating, quantile, unseen, global_mean)


def recent_window(history: list[Interaction], k: int = DEFAULT_HISTORY_WINDOW) -> list[Interaction]:
    if k < 1:
        raise ConfigError(f"history window must be >= 1, got {k}")
    if not history:
        raise InsufficientHistoryError("insufficient history")
    return list(history[-k:])
