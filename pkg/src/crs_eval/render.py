"""How items, preferences and dialogue are shown inside prompts."""

from __future__ import annotations

import json
import re
from typing import Iterable

from .corpus import ItemRecord
from .text import normalize_title, truncate

PLOT_LIMIT = 1200


def redact_title(text: str, title: str, replacement: str = "the film") -> str:
    tokens = normalize_title(title).split()
    if not tokens or not text:
        return text
    pattern = r"(?<!\w)" + r"[\W_]+".join(re.escape(t) for t in tokens) + r"(?!\w)"
    return re.sub(pattern, replacement, text, flags=re.I)


def item_block(item: ItemRecord, plot_limit: int = PLOT_LIMIT, with_title: bool = True) -> str:
    head = f"[{item.item_id}] {item.title}" if with_title else f"[{item.item_id}]"
    lines = [head, f"Genres: {', '.join(item.genres) or 'unknown'}"]
    if item.directors:
        lines.append(f"Directors: {', '.join(item.directors)}")
    if item.stars:
        lines.append(f"Stars: {', '.join(item.stars)}")
    if item.plot:
        lines.append(f"Plot: {truncate(item.plot, plot_limit)}")
    return "\n".join(lines)


def slate_block(items: Iterable[ItemRecord], plot_limit: int = PLOT_LIMIT) -> str:
    return "\n\n".join(item_block(i, plot_limit) for i in items)


def attributes_block(item: ItemRecord, plot_limit: int = PLOT_LIMIT) -> str:
    """Title-free attribute lines; the plot has the title redacted."""
    plot = truncate(redact_title(item.plot, item.title), plot_limit) if item.plot else ""
    return "\n".join([
        f"Genres: {', '.join(item.genres) or 'unknown'}",
        f"Directors: {', '.join(item.directors) or 'unknown'}",
        f"Stars: {', '.join(item.stars) or 'unknown'}",
        f"Plot: {plot or 'not available'}",
    ])


def pref_line(pref, item: ItemRecord | None = None, turn: int | None = None) -> str:
    obj = {"item_id": pref.item_id, "likes": list(pref.likes), "dislikes": list(pref.dislikes)}
    if item is not None:
        obj["title"] = item.title
        obj["genres"] = list(item.genres)
    if turn is not None:
        obj["turn"] = turn
    obj["source"] = pref.source
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def dialogue_block(utterances) -> str:
    names = {"user": "User", "system_recommender": "Recommender"}
    return "\n".join(f"{names[u.role]}: {u.text}" for u in utterances)
