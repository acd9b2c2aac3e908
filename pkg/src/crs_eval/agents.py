"""User-simulator turns, CRS adapters, and the pairwise selection probe."""

from __future__ import annotations

import hashlib
import logging
import os
import random
from typing import Callable, Iterable, Protocol, Sequence

import httpx
import numpy as np

from . import jsonl, prompts, render
from .backends import GenerationBackend, RetryPolicy, generate_parsed, parse_json_object, request_slot
from .corpus import Catalog, ItemRecord, UserRecord
from .dialogue import RECOMMENDER, USER, DialogueContext, TurnResult, Utterance
from .errors import (AdapterContractViolation, AdapterUnavailable, ConfigError, LeakageError,
                     PreferenceParseError)
from .preference import DEFAULT_SETTINGS, PreferenceProfile, PreferenceSettings
from .text import find_titles, normalize

log = logging.getLogger(__name__)

PROTOCOL = "crs-sim/1"

RAW_REVIEWS = "raw_reviews"
BINARY_PREFS = "binary_prefs"
GENERAL_PREFS = "general_prefs"
VARIANTS = (RAW_REVIEWS, BINARY_PREFS, GENERAL_PREFS)


# -- user simulator -----------------------------------------------------------

def _parse_utterance(raw: str) -> str:
    text = " ".join((raw or "").split())
    if not text:
        raise ValueError("empty utterance")
    return text


def user_turn(profile: PreferenceProfile, context: DialogueContext, reflections, backend: GenerationBackend, *,
              user: UserRecord | None = None, catalog: Catalog | None = None,
              last_slate: Sequence[str] = (), reflection_window: int = 3,
              forbidden_titles: Iterable[str] = (),
              settings: PreferenceSettings = DEFAULT_SETTINGS,
              log_to: list | None = None) -> Utterance:
    """Produce u_t.

    The opening turn sees only the general narrative. Later turns also see the
    dialogue so far, the last ``reflection_window`` reflections, the reviews of
    seen items among them, and the current slate.
    """
    if context.utterances and context.last_role() != RECOMMENDER:
        raise ValueError("user turn requires the context to end with a recommender utterance")
    turn = context.turn_count + 1
    if not context.utterances:
        messages = prompts.render("user_opening", {"general_preferences": profile.general.narrative},
                                  settings.prompt_dir)
    else:
        window = list(reflections)[-reflection_window:] if reflection_window > 0 else []
        pref_lines, reviews = [], []
        for refl in window:
            for p in refl.per_item:
                item = catalog.get(p.item_id) if catalog is not None else None
                pref_lines.append(render.pref_line(p, item, refl.turn))
                if p.source == "review_recap" and user is not None:
                    rec = user.interaction(p.item_id)
                    if rec.review.strip():
                        title = item.title if item else p.item_id
                        reviews.append(f"[{p.item_id}] {title} (you rated it {rec.rating}): {rec.review.strip()}")
        slate_items = [catalog[i] for i in last_slate] if catalog is not None else []
        messages = prompts.render("user_response", {
            "general_preferences": profile.general.narrative,
            "seen_reviews": "\n".join(dict.fromkeys(reviews)),
            "reflected_preferences": "\n".join(pref_lines),
            "slate_with_plots": render.slate_block(slate_items, settings.plot_limit),
            "dialogue_history": render.dialogue_block(context.utterances),
        }, settings.prompt_dir)
    forbidden = list(forbidden_titles)
    prompt_text = "\n".join(m["content"] for m in messages)
    hits = find_titles(prompt_text, forbidden, settings.leak_min_title_len)
    if hits:
        raise LeakageError(f"user prompt at turn {turn} contains target titles {hits}", hits)
    text = generate_parsed(backend, messages, _parse_utterance, retries=settings.parse_retries,
                           error_cls=PreferenceParseError, log_to=log_to)
    hits = find_titles(text, forbidden, settings.leak_min_title_len)
    if hits:
        raise LeakageError(f"user utterance at turn {turn} names target titles {hits}", hits)
    return Utterance(USER, turn, text)


# -- CRS adapters -------------------------------------------------------------

class CrsAdapter(Protocol):
    kind: str
    name: str
    k: int
    catalog: Catalog

    def recommend(self, context: DialogueContext, u_t: Utterance,
                  slates=None) -> tuple[str, list[str]]: ...


def _titles_sentence(catalog: Catalog, ids: Sequence[str], lead: str) -> str:
    return f"{lead} " + "; ".join(catalog[i].title for i in ids if i in catalog) + "."


class PopularityAdapter:
    """Top-K most-interacted items, ties broken by catalog order. Ignores the dialogue."""

    kind = "popularity"

    def __init__(self, catalog: Catalog, counts: dict[str, int], k: int = 4, name: str = "popularity"):
        self.catalog = catalog
        self.k = k
        self.name = name
        ids = catalog.ids()
        pos = {i: n for n, i in enumerate(ids)}
        self.ranking = sorted(ids, key=lambda i: (-counts.get(i, 0), pos[i]))

    def recommend(self, context, u_t, slates=None):
        slate = self.ranking[:self.k]
        return _titles_sentence(self.catalog, slate, "Popular picks right now:"), slate


class HashEmbedder:
    """Signed feature hashing of normalized tokens, L2-normalized."""

    def __init__(self, dim: int = 512):
        self.dim = dim

    def token_slot(self, token: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")
        return h % self.dim, (1.0 if (h >> 63) & 1 else -1.0)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            for tok in normalize(text).split():
                idx, sign = self.token_slot(tok)
                out[row, idx] += sign
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return np.divide(out, norms, out=np.zeros_like(out), where=norms > 0)


class RemoteEmbedder:
    """Embeddings endpoint (``POST {endpoint}/embeddings``), e.g. an ada-002 style service."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 client: httpx.Client | None = None, retry: RetryPolicy | None = None):
        self.endpoint = endpoint.rstrip("/")
        if not self.endpoint.endswith("/embeddings"):
            self.endpoint += "/embeddings"
        self.model = model
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=60.0)
        self.retry = retry or RetryPolicy()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        body = {"model": self.model, "input": list(texts)}

        def attempt():
            with request_slot():
                return self._client.post(self.endpoint, json=body, headers=self._headers)

        resp = self.retry.run(attempt, "embedding request", AdapterUnavailable)
        rows = sorted(resp.json()["data"], key=lambda d: d["index"])
        mat = np.array([r["embedding"] for r in rows], dtype=float)
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        return np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0)


def item_text(item: ItemRecord) -> str:
    return " ".join([item.title, *item.genres, *item.directors, *item.stars, item.plot])


class EmbeddingRetrievalAdapter:
    """Ranks catalog items by cosine similarity to the user side of the dialogue."""

    kind = "embedding_retrieval"

    def __init__(self, catalog: Catalog, k: int = 4, embedder=None, name: str = "embedding_retrieval",
                 query_roles: tuple[str, ...] = (USER,)):
        self.catalog = catalog
        self.k = k
        self.name = name
        self.embedder = embedder or HashEmbedder()
        self.query_roles = query_roles
        self._ids = catalog.ids()
        self._matrix = self.embedder.embed([item_text(i) for i in catalog])

    def query_text(self, context: DialogueContext, u_t: Utterance) -> str:
        parts = [u.text for u in context.utterances if u.role in self.query_roles]
        return " ".join(parts + [u_t.text])

    def scores(self, query: str) -> np.ndarray:
        return self._matrix @ self.embedder.embed([query])[0]

    def recommend(self, context, u_t, slates=None):
        # rounding keeps BLAS summation-order noise from reordering exact ties
        scores = np.round(self.scores(self.query_text(context, u_t)), 12)
        # descending score, ties by catalog position
        order = np.lexsort((np.arange(len(scores)), -scores))
        slate = [self._ids[i] for i in order[:self.k]]
        return _titles_sentence(self.catalog, slate, "Based on what you said, you might like:"), slate


class RemoteHttpAdapter:
    """CRS behind the JSON wire contract.

    Request ``{"protocol", "dialogue": [{"role", "text"}...], "k"}`` (plus
    ``"slates"`` when inlining prior slates); response ``{"utterance", "items"}``.
    """

    kind = "remote_http"

    def __init__(self, endpoint: str, catalog: Catalog, k: int = 4, name: str = "remote",
                 client: httpx.Client | None = None, timeout: float = 60.0,
                 retry: RetryPolicy | None = None, inline_slates: bool = False,
                 headers: dict | None = None):
        if not endpoint:
            raise ConfigError("remote_http adapter requires an endpoint")
        self.endpoint = endpoint
        self.catalog = catalog
        self.k = k
        self.name = name
        self.timeout = timeout
        self.inline_slates = inline_slates
        self.retry = retry or RetryPolicy()
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers or {}

    def request_body(self, context: DialogueContext, u_t: Utterance, slates=None) -> dict:
        body = {"protocol": PROTOCOL,
                "dialogue": [{"role": u.role, "text": u.text} for u in [*context.utterances, u_t]],
                "k": self.k}
        if self.inline_slates and slates is not None:
            body["slates"] = [list(s) for s in slates]
        return body

    def recommend(self, context, u_t, slates=None):
        body = self.request_body(context, u_t, slates)

        def attempt():
            with request_slot():
                return self._client.post(self.endpoint, json=body, headers=self._headers,
                                         timeout=self.timeout)

        resp = self.retry.run(attempt, f"CRS {self.name}", AdapterUnavailable)
        obj = parse_json_object(resp.text)
        if obj is None or "items" not in obj or not isinstance(obj["items"], list):
            raise AdapterContractViolation(f"CRS {self.name}: response lacks an 'items' list")
        return str(obj.get("utterance") or ""), [str(i) for i in obj["items"]]


class ScriptedAdapter:
    """Replays ``(utterance, items)`` per turn, or calls ``fn(context, u_t)``."""

    kind = "scripted"

    def __init__(self, catalog: Catalog, k: int = 4, replies: Sequence[dict] = (),
                 fn: Callable | None = None, name: str = "scripted"):
        self.catalog = catalog
        self.k = k
        self.name = name
        self.replies = list(replies)
        self.fn = fn

    def recommend(self, context, u_t, slates=None):
        if self.fn is not None:
            return self.fn(context, u_t)
        idx = u_t.turn - 1
        if idx >= len(self.replies):
            raise AdapterUnavailable(f"scripted CRS has no reply for turn {u_t.turn}")
        r = self.replies[idx]
        return r["utterance"], list(r["items"])


class KeywordAdapter:
    """Puts catalog items whose titles appear in u_t first, then fills from a fallback ranking."""

    kind = "scripted"

    def __init__(self, catalog: Catalog, fallback: Sequence[str], k: int = 4, name: str = "keyword",
                 min_title_len: int = 1):
        self.catalog = catalog
        self.k = k
        self.name = name
        self.fallback = list(fallback)
        self.min_title_len = min_title_len
        self._titles = {i.title: i.item_id for i in catalog}

    def recommend(self, context, u_t, slates=None):
        matched = [self._titles[t] for t in find_titles(u_t.text, self._titles, self.min_title_len)]
        slate = list(dict.fromkeys(matched))[:self.k]
        for item_id in self.fallback:
            if len(slate) >= self.k:
                break
            if item_id not in slate:
                slate.append(item_id)
        return _titles_sentence(self.catalog, slate, "How about:"), slate


class RandomAdapter:
    """Uniform random slates keyed on (seed, user, turn); stateless, so thread-safe."""

    kind = "random"

    def __init__(self, catalog: Catalog, k: int = 4, seed: int = 0, name: str = "random"):
        self.catalog = catalog
        self.k = k
        self.seed = seed
        self.name = name
        self._ids = catalog.ids()

    def recommend(self, context, u_t, slates=None):
        rng = random.Random(f"{self.seed}/{context.user_id}/{u_t.turn}")
        slate = rng.sample(self._ids, self.k)
        return _titles_sentence(self.catalog, slate, "Try:"), slate


def crs_turn(adapter: CrsAdapter, context: DialogueContext, u_t: Utterance,
             seen: Iterable[str] = (), slates=None) -> TurnResult:
    """Ask the CRS for (r_t, P_t) and enforce the slate contract."""
    if u_t.role != USER:
        raise ValueError("crs_turn expects a user utterance")
    if u_t.turn != context.turn_count + 1 or context.last_role() == USER:
        raise ValueError("u_t does not extend the dialogue context")
    text, items = adapter.recommend(context, u_t, slates)
    items = list(items)
    if len(items) != adapter.k:
        raise AdapterContractViolation(f"CRS {adapter.name} returned {len(items)} items, expected {adapter.k}")
    if len(set(items)) != len(items):
        raise AdapterContractViolation(f"CRS {adapter.name} returned duplicate items {items}")
    unknown = [i for i in items if i not in adapter.catalog]
    if unknown:
        raise AdapterContractViolation(f"CRS {adapter.name} returned unknown items {unknown}")
    if not text or not text.strip():
        raise AdapterContractViolation(f"CRS {adapter.name} returned an empty utterance")
    seen = set(seen)
    return TurnResult(u_t.turn, Utterance(RECOMMENDER, u_t.turn, text.strip()), tuple(items),
                      tuple(i for i in items if i in seen), tuple(i for i in items if i not in seen))


def build_adapter(spec: dict, catalog: Catalog, k: int, counts: dict[str, int] | None = None,
                  env: dict | None = None, seed: int = 0) -> CrsAdapter:
    env = os.environ if env is None else env
    kind = spec.get("kind", "popularity")
    name = spec.get("name", kind)
    if kind == "popularity":
        return PopularityAdapter(catalog, counts or {}, k, name=name)
    if kind == "embedding_retrieval":
        embedder = None
        if spec.get("embedding_endpoint") or spec.get("embedding_endpoint_env"):
            endpoint = spec.get("embedding_endpoint") or env.get(spec["embedding_endpoint_env"], "")
            embedder = RemoteEmbedder(endpoint, spec.get("embedding_model", "text-embedding-ada-002"),
                                      api_key=env.get(spec.get("api_key_env", "CRS_EVAL_API_KEY")))
        return EmbeddingRetrievalAdapter(catalog, k, embedder=embedder or HashEmbedder(int(spec.get("dim", 512))),
                                         name=name)
    if kind == "remote_http":
        endpoint = spec.get("endpoint") or env.get(spec.get("endpoint_env", "CRS_EVAL_CRS_ENDPOINT"), "")
        return RemoteHttpAdapter(endpoint, catalog, k, name=name,
                                 timeout=float(spec.get("timeout", 60.0)),
                                 inline_slates=bool(spec.get("inline_slates", False)))
    if kind == "random":
        return RandomAdapter(catalog, k, seed=int(spec.get("seed", seed)), name=name)
    if kind == "scripted":
        rows = sorted(jsonl.read(spec["replay"]), key=lambda r: r.get("turn", 0))
        return ScriptedAdapter(catalog, k, rows, name=name)
    raise ConfigError(f"unknown adapter kind {kind!r}")


# -- pairwise rating probe ----------------------------------------------------

def _parse_choice(raw: str) -> int:
    obj = parse_json_object(raw)
    if obj is None or "choice" not in obj:
        raise ValueError("expected {\"choice\": \"A\" | \"B\"}")
    choice = str(obj["choice"]).strip().upper()
    if choice not in ("A", "B"):
        raise ValueError(f"choice must be A or B, got {obj['choice']!r}")
    return 0 if choice == "A" else 1


def pairwise_select(profile_text: str, pair: tuple[ItemRecord, ItemRecord], backend: GenerationBackend, *,
                    settings: PreferenceSettings = DEFAULT_SETTINGS, log_to: list | None = None) -> int:
    """Index (0 or 1) of the item the simulator says fits its profile better."""
    a, b = pair
    if a.item_id == b.item_id:
        raise ValueError("pair items must be distinct")
    messages = prompts.render("pairwise_select", {
        "profile": profile_text,
        "item_a": render.item_block(a, settings.plot_limit),
        "item_b": render.item_block(b, settings.plot_limit),
    }, settings.prompt_dir)
    return generate_parsed(backend, messages, _parse_choice, retries=settings.parse_retries,
                           error_cls=PreferenceParseError, log_to=log_to)
