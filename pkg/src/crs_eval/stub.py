"""Rule-based replies for the deterministic stub backend.

Each responder reads the tagged sections of the rendered prompt. Choices that
have no rule (which phrase to voice, tie breaks) come from the message digest,
so the reply stays a pure function of the messages.
"""

from __future__ import annotations

import json
import re
from collections import Counter

from .backends import message_digest
from .prompts import section, task_of
from .text import normalize

POSITIVE = {
    "love", "loved", "loves", "great", "good", "excellent", "wonderful", "brilliant",
    "clever", "charming", "beautiful", "gripping", "enjoyed", "enjoy", "fun", "funny",
    "moving", "superb", "stunning", "engaging", "tight", "smart", "witty", "best",
    "memorable", "compelling", "fantastic", "delightful", "pleasingly", "strong",
    "vibrant", "entertaining", "masterful", "touching", "tense", "thrilling",
}
NEGATIVE = {
    "bad", "boring", "dull", "weak", "slow", "poor", "awful", "terrible", "hate",
    "hated", "predictable", "messy", "flat", "bland", "unsatisfying", "tedious",
    "clumsy", "forgettable", "overlong", "confusing", "worst", "disappointing",
    "cheesy", "lifeless", "shallow", "annoying", "wooden",
}
NEGATORS = {"not", "never", "no", "nothing", "hardly"}
_CLAUSE_SPLIT = re.compile(r"[.;!?]+|,\s*(?:but|though|although)\s+|\s+but\s+")
_NARRATIVE_SPLIT = re.compile(r"[.;:,]+|\s+and\s+")
_HEADS = ("i enjoy", "i appreciate", "i like", "i tend to dislike", "i dislike",
          "things i appreciate", "things i avoid", "i gravitate toward", "i am usually put off by")


def _digest_int(messages, salt: str = "") -> int:
    return int(message_digest(list(messages) + [{"role": "salt", "content": salt}])[:12], 16)


_LEAD = {"i", "loved", "love", "really", "at", "least", "the", "a", "an", "and", "but"}
_TAIL = {"though", "too", "overall"}


def _phrase(clause: str, max_words: int = 6) -> str:
    words = re.findall(r"[\w'-]+", clause.lower())
    while words and words[0] in _LEAD:
        words.pop(0)
    while words and words[-1] in _TAIL:
        words.pop()
    return " ".join(words[:max_words])


def _polarity(clause: str) -> int:
    words = re.findall(r"[\w']+", clause.lower())
    score = sum(w in POSITIVE for w in words) - sum(w in NEGATIVE for w in words)
    if any(w in NEGATORS or w.endswith("n't") for w in words):
        score = -score
    return score


def _genres(block: str) -> list[str]:
    m = re.search(r"^Genres:\s*(.*)$", block or "", re.M)
    if not m:
        return []
    return [g.strip() for g in m.group(1).split(",") if g.strip() and g.strip() != "unknown"]


def extract_preferences(messages) -> str:
    user = messages[1]["content"]
    review = section(user, "review") or ""
    item = section(user, "item") or ""
    likes, dislikes = [], []
    for clause in _CLAUSE_SPLIT.split(review):
        phrase = _phrase(clause)
        if not phrase:
            continue
        pol = _polarity(clause)
        if pol > 0 and phrase not in likes:
            likes.append(phrase)
        elif pol < 0 and phrase not in dislikes:
            dislikes.append(phrase)
    if not likes and not dislikes:
        genres = _genres(item)
        likes = [f"{genres[0].lower()} storytelling"] if genres else ["the film overall"]
    return json.dumps({"likes": likes[:3], "dislikes": dislikes[:3]})


def _join(phrases: list[str]) -> str:
    if len(phrases) == 1:
        return phrases[0]
    return ", ".join(phrases[:-1]) + " and " + phrases[-1]


def general_preferences(messages) -> str:
    user = messages[1]["content"]
    budget = int(section(user, "budget") or 200)
    like_counts: Counter = Counter()
    dislike_counts: Counter = Counter()
    genre_counts: Counter = Counter()
    order: dict[str, int] = {}
    for line in (section(user, "binary_preferences") or "").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        for p in obj.get("likes", []):
            like_counts[p] += 1
            order.setdefault(p, len(order))
        for p in obj.get("dislikes", []):
            dislike_counts[p] += 1
            order.setdefault(p, len(order))
        if len(obj.get("likes", [])) >= len(obj.get("dislikes", [])):
            for g in obj.get("genres", []):
                genre_counts[g.lower()] += 1
                order.setdefault(g.lower(), len(order))

    def top(counter, n):
        return sorted(counter, key=lambda p: (-counter[p], order[p]))[:n]

    parts = []
    if genre_counts:
        parts.append(f"I gravitate toward {_join(top(genre_counts, 3))} films.")
    if like_counts:
        parts.append(f"Things I appreciate: {'; '.join(top(like_counts, 6))}.")
    if dislike_counts:
        parts.append(f"Things I avoid: {'; '.join(top(dislike_counts, 4))}.")
    text = " ".join(parts) or "I enjoy a good movie."
    return " ".join(text.split()[:budget])


def target_biased_preferences(messages) -> str:
    user = messages[1]["content"]
    budget = int(section(user, "budget") or 200)
    genres: Counter = Counter()
    people, plots = [], []
    for block in (section(user, "item_attributes") or "").split("\n\n"):
        for g in _genres(block):
            genres[g.lower()] += 1
        for key in ("Directors", "Stars"):
            m = re.search(rf"^{key}:\s*(.*)$", block, re.M)
            if m and m.group(1) != "unknown":
                people.extend(p.strip() for p in m.group(1).split(",")[:1])
        m = re.search(r"^Plot:\s*(.*)$", block, re.M)
        if m and m.group(1) != "not available":
            plots.append(" ".join(m.group(1).split()[:8]))
    parts = []
    if genres:
        parts.append(f"I'm looking for {_join(sorted(genres, key=lambda g: (-genres[g], g))[:3])} films.")
    if people:
        parts.append(f"I like work involving {_join(people[:4])}.")
    if plots:
        parts.append(f"Stories like: {'; '.join(plots[:3])}.")
    text = " ".join(parts) or "I'm looking for something good to watch."
    return " ".join(text.split()[:budget])


def _slate_items(block: str) -> list[tuple[str, list[str]]]:
    items = []
    for chunk in (block or "").split("\n\n"):
        m = re.match(r"\[([^\]]+)\]", chunk.strip())
        if m:
            items.append((m.group(1), _genres(chunk)))
    return items


def reflect_unseen(messages) -> str:
    user = messages[1]["content"]
    narrative = f" {normalize(section(user, 'general_preferences') or '')} "
    out = {}
    for item_id, genres in _slate_items(section(user, "slate_with_plots")):
        liked = [g for g in genres if f" {normalize(g)} " in narrative]
        if liked:
            out[item_id] = {"likes": [f"{g.lower()} elements" for g in liked[:2]], "dislikes": []}
        elif genres:
            out[item_id] = {"likes": [], "dislikes": [f"not my kind of {genres[0].lower()}"]}
        else:
            out[item_id] = {"likes": [], "dislikes": ["does not match my taste"]}
    return json.dumps({"items": out})


def _narrative_phrases(narrative: str) -> list[str]:
    out = []
    for chunk in _NARRATIVE_SPLIT.split(narrative):
        chunk = " ".join(chunk.split()).strip().lower()
        for head in _HEADS:
            if chunk.startswith(head):
                chunk = chunk[len(head):].strip()
        if chunk.endswith(" films"):
            chunk = chunk[:-6]
        if chunk and len(chunk.split()) <= 8 and chunk not in out:
            out.append(chunk)
    return out


def user_opening(messages) -> str:
    narrative = section(messages[1]["content"], "general_preferences") or ""
    phrases = _narrative_phrases(narrative) or ["something good"]
    h = _digest_int(messages)
    first = phrases[h % len(phrases)]
    second = phrases[(h // 7) % len(phrases)]
    if second == first:
        return f"Hi! Could you recommend a movie? I'm really into {first}."
    return f"Hi! Could you recommend a movie? I'm really into {first} and {second}."


def user_response(messages) -> str:
    user = messages[1]["content"]
    phrases = _narrative_phrases(section(user, "general_preferences") or "") or ["something good"]
    h = _digest_int(messages)
    likes, dislikes = [], []
    lines = [ln for ln in (section(user, "reflected_preferences") or "").splitlines() if ln.strip()]
    if lines:
        latest = max(json.loads(ln).get("turn", 0) for ln in lines)
        for ln in lines:
            obj = json.loads(ln)
            if obj.get("turn", 0) == latest:
                likes.extend(obj["likes"])
                dislikes.extend(obj["dislikes"])
    parts = []
    if likes:
        parts.append(f"Some of these have {likes[h % len(likes)]}, which I like.")
    if dislikes:
        parts.append(f"Not so keen where the {dislikes[(h // 3) % len(dislikes)]}.")
    if not parts:
        parts.append("Thanks for the suggestions.")
    parts.append(f"Could you suggest something with {phrases[(h // 11) % len(phrases)]}?")
    return " ".join(parts)


def pairwise_select(messages) -> str:
    user = messages[1]["content"]
    profile = f" {normalize(section(user, 'profile') or '')} "

    def score(block):
        words = set(normalize(" ".join(_genres(block))).split())
        return sum(f" {w} " in profile for w in words)

    a, b = score(section(user, "item_a")), score(section(user, "item_b"))
    if a == b:
        choice = "A" if _digest_int(messages) % 2 == 0 else "B"
    else:
        choice = "A" if a > b else "B"
    return json.dumps({"choice": choice})


def judge(messages) -> str:
    out = {}
    for dim in ("proactiveness", "coherence", "personalization"):
        score = 1 + _digest_int(messages, dim) % 5
        out[dim] = {"rationale": f"stub rationale for {dim}", "score": score}
    return json.dumps(out)


RESPONDERS = {
    "extract_preferences": extract_preferences,
    "general_preferences": general_preferences,
    "target_biased_preferences": target_biased_preferences,
    "reflect_unseen": reflect_unseen,
    "user_opening": user_opening,
    "user_response": user_response,
    "pairwise_select": pairwise_select,
    "judge": judge,
}


def respond(messages) -> str:
    task = task_of(messages)
    if task in RESPONDERS:
        return RESPONDERS[task](messages)
    return f"stub reply {message_digest(messages)[:16]}"
