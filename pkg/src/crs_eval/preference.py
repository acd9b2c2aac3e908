"""Binary preferences, general-preference narratives and per-turn reflections."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import prompts, render
from .backends import GenerationBackend, generate_parsed, parse_json_object
from .corpus import Catalog, ItemRecord, UserRecord, UserSplit
from .errors import LeakageError, PreferenceParseError
from .text import clip_words, find_titles

log = logging.getLogger(__name__)

EXTRACTED = "extracted_from_review"
REFLECTED = "reflected_on_unseen"
RECAP = "review_recap"
SOURCES = (EXTRACTED, REFLECTED, RECAP)

TARGET_FREE = "target_free"
TARGET_BIASED = "target_biased"


@dataclass
class PreferenceSettings:
    parse_retries: int = 1
    narrative_budget: int = 200  # words
    plot_limit: int = render.PLOT_LIMIT
    leak_min_title_len: int = 4
    prompt_dir: str | None = None


DEFAULT_SETTINGS = PreferenceSettings()


def _clean_phrases(values, what: str) -> tuple[str, ...]:
    if values is None:
        return ()
    if not isinstance(values, (list, tuple)):
        raise ValueError(f"{what} must be a list")
    out = []
    for v in values:
        if not isinstance(v, str):
            raise ValueError(f"{what} entries must be strings")
        v = " ".join(v.split())
        if not v:
            raise ValueError(f"{what} contains an empty phrase")
        out.append(v)
    return tuple(out)


@dataclass(frozen=True)
class BinaryPreference:
    item_id: str
    likes: tuple[str, ...]
    dislikes: tuple[str, ...]
    source: str = EXTRACTED

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown preference source {self.source!r}")
        if not self.likes and not self.dislikes:
            raise ValueError(f"item {self.item_id}: likes and dislikes are both empty")
        if any(not p.strip() for p in self.likes + self.dislikes):
            raise ValueError(f"item {self.item_id}: empty phrase")

    def with_source(self, source: str) -> "BinaryPreference":
        return BinaryPreference(self.item_id, self.likes, self.dislikes, source)

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "likes": list(self.likes),
                "dislikes": list(self.dislikes), "source": self.source}

    @classmethod
    def from_dict(cls, obj: dict) -> "BinaryPreference":
        return cls(obj["item_id"], tuple(obj["likes"]), tuple(obj["dislikes"]), obj["source"])


@dataclass(frozen=True)
class GeneralPreference:
    user_id: str
    narrative: str
    provenance: tuple[str, ...]
    mode: str = TARGET_FREE

    def __post_init__(self):
        if not self.narrative.strip():
            raise ValueError("narrative must be non-empty")

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, "narrative": self.narrative,
                "provenance": list(self.provenance), "mode": self.mode}

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneralPreference":
        return cls(obj["user_id"], obj["narrative"], tuple(obj["provenance"]),
                   obj.get("mode", TARGET_FREE))


@dataclass(frozen=True)
class ReflectedPreference:
    turn: int
    per_item: tuple[BinaryPreference, ...]

    def counts(self) -> dict[str, int]:
        out = {RECAP: 0, REFLECTED: 0}
        for p in self.per_item:
            out[p.source] = out.get(p.source, 0) + 1
        return out

    def to_dict(self) -> dict:
        return {"turn": self.turn, "per_item": [p.to_dict() for p in self.per_item]}

    @classmethod
    def from_dict(cls, obj: dict) -> "ReflectedPreference":
        return cls(int(obj["turn"]), tuple(BinaryPreference.from_dict(p) for p in obj["per_item"]))


@dataclass
class PreferenceProfile:
    """Everything the simulator knows about its user."""

    user_id: str
    general: GeneralPreference
    seen_prefs: dict[str, BinaryPreference] = field(default_factory=dict)
    reflections: list[ReflectedPreference] = field(default_factory=list)

    def window(self, size: int) -> list[ReflectedPreference]:
        return self.reflections[-size:] if size > 0 else []


def parse_binary(raw: str, item_id: str, source: str = EXTRACTED) -> BinaryPreference:
    obj = parse_json_object(raw)
    if obj is None:
        raise ValueError("no JSON object found")
    return _binary_from_obj(obj, item_id, source)


def _binary_from_obj(obj, item_id: str, source: str) -> BinaryPreference:
    if not isinstance(obj, dict) or "likes" not in obj and "dislikes" not in obj:
        raise ValueError("expected 'likes'/'dislikes' keys")
    likes = _clean_phrases(obj.get("likes"), "likes")
    dislikes = _clean_phrases(obj.get("dislikes"), "dislikes")
    if not likes and not dislikes:
        raise ValueError("likes and dislikes are both empty")
    return BinaryPreference(item_id, likes, dislikes, source)


def extract_binary_preferences(review: str, item: ItemRecord, backend: GenerationBackend, *,
                               source: str = EXTRACTED,
                               settings: PreferenceSettings = DEFAULT_SETTINGS,
                               log_to: list | None = None) -> BinaryPreference:
    """Turn one raw review into structured likes/dislikes."""
    if not review or not review.strip():
        raise ValueError(f"item {item.item_id}: review is empty")
    messages = prompts.render("extract_preferences", {
        "item": render.item_block(item, settings.plot_limit),
        "review": review.strip(),
    }, settings.prompt_dir)
    return generate_parsed(backend, messages, lambda raw: parse_binary(raw, item.item_id, source),
                           retries=settings.parse_retries, error_cls=PreferenceParseError,
                           log_to=log_to)


def rating_fallback(item_id: str, rating: int, scale: tuple[int, int] = (1, 10),
                    source: str = EXTRACTED) -> BinaryPreference:
    """Preference for an interaction with no review text; sentiment from the rating alone."""
    lo, hi = scale
    if rating >= lo + (hi - lo) / 2:
        return BinaryPreference(item_id, (f"enjoyed it overall ({rating}/{hi})",), (), source)
    return BinaryPreference(item_id, (), (f"did not enjoy it overall ({rating}/{hi})",), source)


def extract_seen_preferences(user: UserRecord, split: UserSplit, catalog: Catalog,
                             backend: GenerationBackend, *,
                             settings: PreferenceSettings = DEFAULT_SETTINGS,
                             log_to: list | None = None) -> dict[str, BinaryPreference]:
    out = {}
    for item_id in split.seen:
        rec = user.interaction(item_id)
        if rec.review.strip():
            out[item_id] = extract_binary_preferences(rec.review, catalog[item_id], backend,
                                                      settings=settings, log_to=log_to)
        else:
            out[item_id] = rating_fallback(item_id, rec.rating)
    return out


def _check_prompt(messages, forbidden_titles, settings, what: str) -> None:
    text = "\n".join(m["content"] for m in messages)
    hits = find_titles(text, forbidden_titles, settings.leak_min_title_len)
    if hits:
        raise LeakageError(f"{what} prompt contains target titles: {hits}", hits)


def generate_general_preference(seen_prefs: Sequence[BinaryPreference],
                                seen_items: Sequence[ItemRecord],
                                backend: GenerationBackend, *,
                                user_id: str = "",
                                forbidden_titles: Iterable[str] = (),
                                targets: Iterable[str] = (),
                                settings: PreferenceSettings = DEFAULT_SETTINGS,
                                log_to: list | None = None) -> GeneralPreference:
    """Synthesize the narrative that initializes a target-free simulator.

    ``forbidden_titles`` are the user's target titles; a narrative naming one is
    regenerated once, then rejected.
    """
    if not seen_prefs:
        raise ValueError("seen_prefs must be non-empty")
    by_id = {i.item_id: i for i in seen_items}
    provenance = tuple(p.item_id for p in seen_prefs)
    missing = [i for i in provenance if i not in by_id]
    if missing:
        raise ValueError(f"preferences for items outside the seen set: {missing}")
    leaked_ids = set(provenance) & set(targets)
    if leaked_ids:
        raise LeakageError(f"provenance includes target items {sorted(leaked_ids)}", sorted(leaked_ids))
    forbidden = list(forbidden_titles)
    lines = "\n".join(render.pref_line(p, by_id[p.item_id]) for p in seen_prefs)
    messages = prompts.render("general_preferences", {
        "binary_preferences": lines, "budget": settings.narrative_budget,
    }, settings.prompt_dir)
    _check_prompt(messages, forbidden, settings, "general-preference")

    attempt = messages
    for i in range(2):
        if log_to is not None:
            log_to.append([dict(m) for m in attempt])
        narrative = clip_words(backend.generate(attempt).strip(), settings.narrative_budget)
        hits = find_titles(narrative, forbidden, settings.leak_min_title_len)
        if narrative and not hits:
            return GeneralPreference(user_id, narrative, provenance, TARGET_FREE)
        if i == 0:
            log.warning("user %s: narrative rejected (%s); regenerating", user_id,
                        "empty" if not narrative else f"names {hits}")
            attempt = messages + [
                {"role": "assistant", "content": narrative},
                {"role": "user", "content": "Rewrite the description without naming any specific movie."},
            ]
    if not narrative:
        raise PreferenceParseError("empty general-preference narrative", narrative)
    raise LeakageError(f"user {user_id}: narrative names target titles {hits}", hits)


def generate_target_biased_preference(target_items: Sequence[ItemRecord],
                                      backend: GenerationBackend, *,
                                      user_id: str = "",
                                      forbidden_titles: Iterable[str] = (),
                                      settings: PreferenceSettings = DEFAULT_SETTINGS,
                                      log_to: list | None = None) -> GeneralPreference:
    """Narrative from target-item attributes only; titles never reach the prompt."""
    if not target_items:
        raise ValueError("target_items must be non-empty")
    blocks = "\n\n".join(render.attributes_block(i, settings.plot_limit) for i in target_items)
    messages = prompts.render("target_biased_preferences", {
        "item_attributes": blocks, "budget": settings.narrative_budget,
    }, settings.prompt_dir)
    titles = [i.title for i in target_items] + list(forbidden_titles)
    _check_prompt(messages, titles, settings, "target-biased")
    if log_to is not None:
        log_to.append([dict(m) for m in messages])
    narrative = clip_words(backend.generate(messages).strip(), settings.narrative_budget)
    if not narrative:
        raise PreferenceParseError("empty target-biased narrative", narrative)
    return GeneralPreference(user_id, narrative, tuple(i.item_id for i in target_items), TARGET_BIASED)


def parse_reflection(raw: str, item_ids: Sequence[str]) -> dict[str, BinaryPreference]:
    obj = parse_json_object(raw)
    if obj is None:
        raise ValueError("no JSON object found")
    items = obj.get("items", obj)
    if not isinstance(items, dict):
        raise ValueError("'items' must be an object keyed by item id")
    out = {}
    for item_id in item_ids:
        if item_id not in items:
            raise ValueError(f"missing item {item_id}")
        out[item_id] = _binary_from_obj(items[item_id], item_id, REFLECTED)
    return out


def reflect(slate: Sequence[ItemRecord], split: UserSplit, user: UserRecord,
            general: GeneralPreference, turn: int, backend: GenerationBackend, *,
            seen_prefs: dict[str, BinaryPreference] | None = None,
            dialogue_history: str = "",
            settings: PreferenceSettings = DEFAULT_SETTINGS,
            log_to: list | None = None) -> ReflectedPreference:
    """React to the presented slate.

    Seen items are recapped from the user's own review; unseen items get
    likes/dislikes judged against the general preferences in one backend call.
    """
    if turn < 2:
        raise ValueError("reflection starts at turn 2")
    if not slate:
        raise ValueError("slate must be non-empty")
    seen = set(split.seen)
    entries: dict[str, BinaryPreference] = {}
    unseen = [i for i in slate if i.item_id not in seen]
    for item in slate:
        if item.item_id not in seen:
            continue
        if seen_prefs and item.item_id in seen_prefs:
            entries[item.item_id] = seen_prefs[item.item_id].with_source(RECAP)
            continue
        rec = user.interaction(item.item_id)
        if rec.review.strip():
            entries[item.item_id] = extract_binary_preferences(
                rec.review, item, backend, source=RECAP, settings=settings, log_to=log_to)
        else:
            entries[item.item_id] = rating_fallback(item.item_id, rec.rating, source=RECAP)
    if unseen:
        messages = prompts.render("reflect_unseen", {
            "general_preferences": general.narrative,
            "dialogue_history": dialogue_history,
            "slate_with_plots": render.slate_block(unseen, settings.plot_limit),
        }, settings.prompt_dir)
        ids = [i.item_id for i in unseen]
        entries.update(generate_parsed(backend, messages, lambda raw: parse_reflection(raw, ids),
                                       retries=settings.parse_retries,
                                       error_cls=PreferenceParseError, log_to=log_to))
    return ReflectedPreference(turn, tuple(entries[i.item_id] for i in slate))
