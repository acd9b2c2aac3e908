"""User/item corpus: loading, alignment against a catalog, and seen/target splits."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from . import jsonl
from .errors import CorpusError, SplitError
from .text import normalize_title

log = logging.getLogger(__name__)

DEFAULT_RATING_SCALE = (1, 10)
DEFAULT_K_MIN = 10
DEFAULT_N_TARGETS = 5


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    title: str
    genres: tuple[str, ...] = ()
    directors: tuple[str, ...] = ()
    stars: tuple[str, ...] = ()
    plot: str = ""
    year: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("genres", "directors", "stars"):
            d[key] = list(d[key])
        if d["year"] is None:
            del d["year"]
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "ItemRecord":
        title = obj.get("title")
        if not isinstance(title, str) or not title.strip():
            raise ValueError("missing or empty 'title'")
        if "item_id" not in obj:
            raise ValueError("missing 'item_id'")
        return cls(
            item_id=str(obj["item_id"]),
            title=title,
            genres=tuple(obj.get("genres") or ()),
            directors=tuple(obj.get("directors") or ()),
            stars=tuple(obj.get("stars") or ()),
            plot=obj.get("plot") or "",
            year=obj.get("year"),
        )


@dataclass(frozen=True)
class InteractionRecord:
    item_id: str
    rating: int
    review: str = ""
    timestamp: int | None = None
    # only used by title-based alignment when item_id does not resolve
    title: str | None = None
    year: int | None = None

    def to_dict(self) -> dict:
        d = {"item_id": self.item_id, "rating": self.rating, "review": self.review,
             "timestamp": self.timestamp}
        if self.title is not None:
            d["title"] = self.title
        if self.year is not None:
            d["year"] = self.year
        return d


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    interactions: tuple[InteractionRecord, ...]

    @property
    def item_ids(self) -> list[str]:
        return [i.item_id for i in self.interactions]

    def interaction(self, item_id: str) -> InteractionRecord:
        for rec in self.interactions:
            if rec.item_id == item_id:
                return rec
        raise KeyError(item_id)

    def to_dict(self) -> dict:
        return {"user_id": self.user_id,
                "interactions": [i.to_dict() for i in self.interactions]}


@dataclass(frozen=True)
class UserSplit:
    user_id: str
    seen: tuple[str, ...]
    targets: tuple[str, ...]
    rng_seed: int

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, "seed": self.rng_seed,
                "seen": list(self.seen), "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, obj: dict) -> "UserSplit":
        return cls(str(obj["user_id"]), tuple(obj["seen"]), tuple(obj["targets"]),
                   int(obj["seed"]))


class Catalog:
    """Ordered, id-unique collection of items."""

    def __init__(self, items: Iterable[ItemRecord] = ()):
        self._items: dict[str, ItemRecord] = {}
        for item in items:
            if item.item_id in self._items:
                raise CorpusError(f"duplicate item_id {item.item_id!r}")
            self._items[item.item_id] = item

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[ItemRecord]:
        return iter(self._items.values())

    def __contains__(self, item_id: object) -> bool:
        return item_id in self._items

    def __getitem__(self, item_id: str) -> ItemRecord:
        try:
            return self._items[item_id]
        except KeyError:
            raise CorpusError(f"item {item_id!r} not in catalog") from None

    def get(self, item_id: str) -> ItemRecord | None:
        return self._items.get(item_id)

    def ids(self) -> list[str]:
        return list(self._items)

    def titles(self, item_ids: Iterable[str]) -> list[str]:
        return [self[i].title for i in item_ids]

    def save(self, path) -> None:
        jsonl.write(path, (item.to_dict() for item in self))


def ingest_catalog(path) -> Catalog:
    path = Path(path)
    items = []
    seen_ids: set[str] = set()
    for lineno, line in jsonl.iter_lines(path):
        try:
            item = ItemRecord.from_dict(json.loads(line))
        except (ValueError, TypeError, AttributeError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed item: {exc}") from None
        if item.item_id in seen_ids:
            raise CorpusError(f"{path}:{lineno}: duplicate item_id {item.item_id!r}")
        seen_ids.add(item.item_id)
        items.append(item)
    log.info("ingested %d items from %s", len(items), path)
    return Catalog(items)


def _parse_interaction(obj: dict, scale: tuple[int, int]) -> InteractionRecord:
    rating = obj["rating"]
    if isinstance(rating, bool) or not isinstance(rating, int):
        raise ValueError(f"rating must be an integer, got {rating!r}")
    lo, hi = scale
    if not lo <= rating <= hi:
        raise ValueError(f"rating {rating} outside scale [{lo}, {hi}]")
    item_id = obj.get("item_id")
    title = obj.get("title")
    if item_id is None and not title:
        raise ValueError("interaction needs an item_id or a title")
    return InteractionRecord(
        item_id=str(item_id) if item_id is not None else "",
        rating=rating,
        review=obj.get("review") or "",
        timestamp=obj.get("timestamp"),
        title=title,
        year=obj.get("year"),
    )


def dedupe_interactions(interactions: Sequence[InteractionRecord]) -> tuple[InteractionRecord, ...]:
    """One interaction per item: latest timestamp wins, else the last occurrence.

    Output keeps the position of each item's first appearance.
    """
    order: list[str] = []
    best: dict[str, tuple[int, InteractionRecord]] = {}
    for pos, rec in enumerate(interactions):
        if rec.item_id not in best:
            order.append(rec.item_id)
            best[rec.item_id] = (pos, rec)
            continue
        _, prev = best[rec.item_id]
        if prev.timestamp is not None and rec.timestamp is not None:
            if rec.timestamp >= prev.timestamp:
                best[rec.item_id] = (pos, rec)
        else:
            best[rec.item_id] = (pos, rec)
    return tuple(best[i][1] for i in order)


def load_users(path, rating_scale: tuple[int, int] = DEFAULT_RATING_SCALE) -> list[UserRecord]:
    path = Path(path)
    users = []
    for lineno, line in jsonl.iter_lines(path):
        try:
            obj = json.loads(line)
            interactions = [_parse_interaction(i, rating_scale) for i in obj["interactions"]]
            user_id = str(obj["user_id"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed user: {exc}") from None
        users.append(UserRecord(user_id, tuple(interactions)))
    return users


def save_users(path, users: Iterable[UserRecord]) -> None:
    jsonl.write(path, (u.to_dict() for u in users))


@dataclass
class AlignmentReport:
    users_in: int = 0
    users_kept: int = 0
    users_dropped: int = 0
    interactions_in: int = 0
    interactions_kept: int = 0
    matched_by_title: int = 0
    dropped_user_ids: list[str] = field(default_factory=list)


class _TitleIndex:
    def __init__(self, catalog: Catalog):
        self._by_title: dict[str, list[ItemRecord]] = {}
        for item in catalog:
            self._by_title.setdefault(normalize_title(item.title), []).append(item)

    def resolve(self, title: str, year: int | None) -> str | None:
        candidates = self._by_title.get(normalize_title(title), [])
        if year is not None:
            dated = [c for c in candidates if c.year == year]
            if len(dated) == 1:
                return dated[0].item_id
            if dated:
                return None
            # the catalog may not record a year for the title at all
            candidates = [c for c in candidates if c.year is None]
        return candidates[0].item_id if len(candidates) == 1 else None


def align_users_with_report(users: Iterable[UserRecord], catalog: Catalog,
                            k_min: int = DEFAULT_K_MIN) -> tuple[list[UserRecord], AlignmentReport]:
    if k_min < 1:
        raise ValueError("k_min must be >= 1")
    index = _TitleIndex(catalog)
    report = AlignmentReport()
    kept = []
    for user in users:
        report.users_in += 1
        report.interactions_in += len(user.interactions)
        resolved = []
        for rec in user.interactions:
            if rec.item_id in catalog:
                resolved.append(rec)
                continue
            if rec.title:
                item_id = index.resolve(rec.title, rec.year)
                if item_id is not None:
                    report.matched_by_title += 1
                    resolved.append(InteractionRecord(item_id, rec.rating, rec.review,
                                                      rec.timestamp, rec.title, rec.year))
        resolved = dedupe_interactions(resolved)
        if len(resolved) < k_min:
            report.users_dropped += 1
            report.dropped_user_ids.append(user.user_id)
            continue
        report.users_kept += 1
        report.interactions_kept += len(resolved)
        kept.append(UserRecord(user.user_id, resolved))
    log.info("aligned users: kept %d, dropped %d (k_min=%d)",
             report.users_kept, report.users_dropped, k_min)
    return kept, report


def align_users(users: Iterable[UserRecord], catalog: Catalog,
                k_min: int = DEFAULT_K_MIN) -> list[UserRecord]:
    """Keep catalog-resolvable interactions; drop users left with fewer than ``k_min``."""
    return align_users_with_report(users, catalog, k_min)[0]


def split_user(user: UserRecord, n_targets: int = DEFAULT_N_TARGETS, seed: int = 0,
               strategy: str = "random") -> UserSplit:
    """Partition a user's items into seen and target sets.

    ``random`` draws targets uniformly without replacement from an RNG keyed on
    (seed, user_id). ``chronological`` holds out the latest interactions.
    """
    ids = user.item_ids
    if not 1 <= n_targets < len(ids):
        raise SplitError(f"user {user.user_id}: n_targets={n_targets} needs 1 <= n < {len(ids)}")
    if strategy == "random":
        rng = random.Random(f"{seed}/{user.user_id}")
        targets = rng.sample(ids, n_targets)
    elif strategy == "chronological":
        order = sorted(range(len(ids)),
                       key=lambda i: (user.interactions[i].timestamp or 0, i))
        targets = [ids[i] for i in order[-n_targets:]]
    else:
        raise SplitError(f"unknown split strategy {strategy!r}")
    chosen = set(targets)
    seen = tuple(i for i in ids if i not in chosen)
    return UserSplit(user.user_id, seen, tuple(targets), seed)


def restrict_history(split: UserSplit, size: int, seed: int | None = None) -> UserSplit:
    """Shrink the seen set to ``size`` items.

    Uses a seeded permutation so a smaller history is always a subset of a
    larger one for the same seed.
    """
    if size >= len(split.seen):
        return split
    if size < 1:
        raise SplitError("history size must be >= 1")
    rng = random.Random(f"history/{split.rng_seed if seed is None else seed}/{split.user_id}")
    order = list(split.seen)
    rng.shuffle(order)
    keep = set(order[:size])
    return UserSplit(split.user_id, tuple(i for i in split.seen if i in keep),
                     split.targets, split.rng_seed)


def save_splits(path, splits: Iterable[UserSplit]) -> None:
    jsonl.write(path, (s.to_dict() for s in splits))


def load_splits(path) -> list[UserSplit]:
    return [UserSplit.from_dict(o) for o in jsonl.read(path)]


def interaction_counts(users: Iterable[UserRecord]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for user in users:
        for rec in user.interactions:
            counts[rec.item_id] = counts.get(rec.item_id, 0) + 1
    return counts
