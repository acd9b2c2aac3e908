"""Title normalization and leakage scanning."""

from __future__ import annotations

import re
import unicodedata
from typing import Iterable

_YEAR_SUFFIX = re.compile(r"\s*[\(\[]\s*\d{4}\s*[\)\]]\s*$")
_APOSTROPHE = re.compile(r"['\u2019]")
_NON_WORD = re.compile(r"[^\w\s]+")
_SPACES = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Casefold, drop punctuation (apostrophes vanish, the rest become spaces), collapse whitespace."""
    text = unicodedata.normalize("NFKC", text).casefold()
    text = _APOSTROPHE.sub("", text)
    text = _NON_WORD.sub(" ", text).replace("_", " ")
    return _SPACES.sub(" ", text).strip()


def normalize_title(title: str) -> str:
    """Like :func:`normalize` but year-insensitive: ``"Heat (1995)"`` -> ``"heat"``."""
    return normalize(_YEAR_SUFFIX.sub("", title))


def title_key(title: str, year: int | None) -> tuple[str, int | None]:
    return normalize_title(title), year


def find_titles(text: str, titles: Iterable[str], min_len: int = 4) -> list[str]:
    """Return the titles whose normalized form occurs in ``text``.

    Matching is on whole normalized tokens, so "alien" does not hit "aliens".
    Titles shorter than ``min_len`` normalized characters are skipped; they
    collide with ordinary words ("up", "it").
    """
    haystack = f" {normalize(text)} "
    hits = []
    for title in titles:
        needle = normalize_title(title)
        if len(needle) < min_len:
            continue
        if f" {needle} " in haystack:
            hits.append(title)
    return hits


def truncate(text: str, limit: int) -> str:
    if len(text) <= limit:
        return text
    return text[: max(limit - 3, 0)].rstrip() + "..."


def word_count(text: str) -> int:
    return len(text.split())


def clip_words(text: str, budget: int) -> str:
    words = text.split()
    if len(words) <= budget:
        return text
    return " ".join(words[:budget])
