"""Synthetic movie corpus for offline runs and tests.

Titles, plots and reviews draw on disjoint vocabularies so that no title can
appear in review-derived text by accident.
"""

from __future__ import annotations

import random

from .corpus import Catalog, InteractionRecord, ItemRecord, UserRecord

GENRES = ["Drama", "Comedy", "Thriller", "Horror", "Romance", "Sci-Fi", "Animation",
          "Documentary", "Western", "Musical", "Crime", "Fantasy"]
_ADJ = ["Silent", "Crimson", "Hollow", "Golden", "Broken", "Distant", "Frozen", "Hidden",
        "Burning", "Velvet", "Iron", "Paper", "Glass", "Wandering", "Last", "Secret"]
_NOUN = ["Harbor", "Orchard", "Lantern", "Meridian", "Canyon", "Compass", "Tide", "Citadel",
         "Garden", "Signal", "Voyage", "Ember", "Quarry", "Archive", "Pavilion", "Horizon"]
_FIRST = ["Ana", "Boris", "Chen", "Dara", "Emil", "Farah", "Goran", "Hana", "Ivo", "Jia",
          "Kofi", "Lena", "Milo", "Nadia", "Omar", "Pia"]
_LAST = ["Abara", "Bellweather", "Castellan", "Drummond", "Esquivel", "Fairbanks", "Grisham",
         "Holloway", "Ingram", "Jaskowski", "Kessler", "Lindqvist"]
_PLOT_SUBJ = ["a retired courier", "two estranged sisters", "a young cartographer",
              "a disgraced chef", "an aging boxer", "a lonely lighthouse keeper",
              "a team of amateur thieves", "a small-town teacher"]
_PLOT_VERB = ["uncovers a family secret", "plans one final job", "crosses the country",
              "confronts an old rival", "falls for a stranger", "fights to save a farm",
              "searches for a missing friend", "rebuilds a ruined life"]
_PLOT_TAIL = ["over a single summer.", "during a bitter winter.", "against all odds.",
              "while the town watches.", "before time runs out."]
_ASPECTS = ["pacing", "soundtrack", "cinematography", "dialogue", "ending", "acting",
            "characters", "visual style", "humor", "atmosphere", "plot twists", "costumes"]
_POS = ["gripping", "wonderful", "clever", "charming", "beautiful", "superb", "engaging", "witty"]
_NEG = ["boring", "predictable", "messy", "flat", "tedious", "clumsy", "forgettable", "bland"]


def make_catalog(n_items: int = 60, seed: int = 0) -> Catalog:
    rng = random.Random(f"toy-catalog/{seed}")
    titles = [f"The {a} {n}" for a in _ADJ for n in _NOUN]
    rng.shuffle(titles)
    if n_items > len(titles):
        raise ValueError(f"toy catalog supports at most {len(titles)} items")
    items = []
    for i in range(n_items):
        items.append(ItemRecord(
            item_id=f"m{i:03d}",
            title=titles[i],
            genres=tuple(rng.sample(GENRES, rng.randint(1, 3))),
            directors=(f"{rng.choice(_FIRST)} {rng.choice(_LAST)}",),
            stars=tuple(f"{rng.choice(_FIRST)} {rng.choice(_LAST)}" for _ in range(2)),
            plot=f"{rng.choice(_PLOT_SUBJ).capitalize()} {rng.choice(_PLOT_VERB)} {rng.choice(_PLOT_TAIL)}",
            year=1970 + rng.randrange(50),
        ))
    return Catalog(items)


def make_review(rating: int, rng: random.Random) -> str:
    aspects = rng.sample(_ASPECTS, 3)
    if rating >= 6:
        parts = [f"The {aspects[0]} felt {rng.choice(_POS)}", f"I loved the {rng.choice(_POS)} {aspects[1]}"]
        if rng.random() < 0.5:
            parts.append(f"the {aspects[2]} felt {rng.choice(_NEG)} though")
    else:
        parts = [f"The {aspects[0]} felt {rng.choice(_NEG)}", f"the {aspects[1]} felt {rng.choice(_NEG)}"]
        if rng.random() < 0.5:
            parts.append(f"at least the {aspects[2]} felt {rng.choice(_POS)}")
    return ". ".join(parts) + "."


def make_users(catalog: Catalog, n_users: int = 10, min_items: int = 12, max_items: int = 30,
               seed: int = 0, review_rate: float = 0.9) -> list[UserRecord]:
    rng = random.Random(f"toy-users/{seed}")
    ids = catalog.ids()
    weights = [1.0 / (rank + 1) ** 0.8 for rank in range(len(ids))]  # popularity skew
    users = []
    for u in range(n_users):
        n = rng.randint(min_items, min(max_items, len(ids)))
        chosen: list[str] = []
        while len(chosen) < n:
            pick = rng.choices(ids, weights)[0]
            if pick not in chosen:
                chosen.append(pick)
        interactions = []
        for j, item_id in enumerate(chosen):
            rating = rng.randint(1, 10)
            review = make_review(rating, rng) if rng.random() < review_rate else ""
            interactions.append(InteractionRecord(item_id, rating, review, 1_600_000_000 + 86_400 * j))
        users.append(UserRecord(f"u{u:03d}", tuple(interactions)))
    return users
