"""Text-generation backends: remote chat-completions, deterministic stub, scripted replay."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from collections import deque
from typing import Callable, Iterable, Protocol, Sequence

import httpx

from . import jsonl
from .errors import BackendUnavailable, ConfigError, ScriptExhausted

log = logging.getLogger(__name__)

Message = dict  # {"role": "system" | "user" | "assistant", "content": str}

RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}

_limiter_lock = threading.Lock()
_limiter = threading.BoundedSemaphore(16)


def set_request_limit(n: int) -> None:
    """Bound the number of in-flight remote requests across all backends and adapters."""
    global _limiter
    if n < 1:
        raise ValueError("request limit must be >= 1")
    with _limiter_lock:
        _limiter = threading.BoundedSemaphore(n)


def request_slot() -> threading.BoundedSemaphore:
    return _limiter


def message_digest(messages: Sequence[Message]) -> str:
    return hashlib.sha256(jsonl.dumps(list(messages)).encode("utf-8")).hexdigest()


class GenerationBackend(Protocol):
    kind: str
    model_name: str

    def generate(self, messages: Sequence[Message]) -> str: ...


def backoff_schedule(attempts: int, base: float = 1.0, factor: float = 2.0) -> list[float]:
    """Delays slept between ``attempts`` tries (one fewer than attempts)."""
    return [base * factor ** i for i in range(max(attempts - 1, 0))]


class RetryPolicy:
    def __init__(self, max_attempts: int = 5, base: float = 1.0, factor: float = 2.0,
                 jitter: bool = False, sleep: Callable[[float], None] = time.sleep,
                 rng: random.Random | None = None):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.max_attempts = max_attempts
        self.base = base
        self.factor = factor
        self.jitter = jitter
        self.sleep = sleep
        self._rng = rng or random.Random()

    def delay(self, retry_index: int) -> float:
        d = self.base * self.factor ** retry_index
        if self.jitter:
            d *= 0.5 + self._rng.random()
        return d

    def run(self, attempt: Callable[[], "httpx.Response"], what: str,
            error_cls: type[Exception] = BackendUnavailable) -> "httpx.Response":
        last = "no attempt made"
        for i in range(self.max_attempts):
            try:
                resp = attempt()
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    return resp
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code not in RETRYABLE_STATUS:
                    raise error_cls(f"{what} failed: {last}")
            if i + 1 < self.max_attempts:
                delay = self.delay(i)
                log.warning("%s attempt %d failed (%s); retrying in %.2fs", what, i + 1, last, delay)
                self.sleep(delay)
        raise error_cls(f"{what} failed after {self.max_attempts} attempts: {last}")


class RemoteChatBackend:
    """Chat-completions HTTP client (``POST {endpoint}/chat/completions``)."""

    kind = "remote_chat"

    def __init__(self, endpoint: str, model_name: str, api_key: str | None = None,
                 temperature: float = 0.0, timeout: float = 60.0,
                 retry: RetryPolicy | None = None, client: httpx.Client | None = None):
        if not endpoint:
            raise ConfigError("remote_chat backend requires an endpoint")
        self.endpoint = endpoint.rstrip("/")
        if not self.endpoint.endswith("/chat/completions"):
            self.endpoint += "/chat/completions"
        self.model_name = model_name
        self.temperature = temperature
        self.timeout = timeout
        self.retry = retry or RetryPolicy()
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    def payload(self, messages: Sequence[Message]) -> dict:
        return {"model": self.model_name,
                "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
                "temperature": self.temperature}

    def generate(self, messages: Sequence[Message]) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        body = self.payload(messages)

        def attempt():
            with request_slot():
                return self._client.post(self.endpoint, json=body, headers=self._headers,
                                         timeout=self.timeout)

        resp = self.retry.run(attempt, f"chat completion ({self.model_name})")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"unexpected chat-completion response: {exc}") from None


class StubBackend:
    """Deterministic offline backend.

    Replies are a pure function of the message list: the prompt's task tag picks
    a rule-based responder and a SHA-256 digest of the messages breaks ties.
    """

    kind = "deterministic_stub"

    def __init__(self, model_name: str = "stub"):
        self.model_name = model_name

    def generate(self, messages: Sequence[Message]) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        from .stub import respond
        return respond(messages)


class ScriptedBackend:
    """Replays queued replies in order; records every prompt it receives."""

    kind = "scripted"

    def __init__(self, replies: Iterable[str] = (), model_name: str = "scripted"):
        self.model_name = model_name
        self._queue = deque(replies)
        self._lock = threading.Lock()
        self.calls: list[list[Message]] = []

    @classmethod
    def from_file(cls, path, model_name: str = "scripted") -> "ScriptedBackend":
        """Replay file: one ``{"turn": n, "reply": "..."}`` object per line."""
        rows = jsonl.read(path)
        rows.sort(key=lambda r: r.get("turn", 0))
        return cls([r["reply"] for r in rows], model_name=model_name)

    def push(self, *replies: str) -> None:
        with self._lock:
            self._queue.extend(replies)

    def remaining(self) -> int:
        return len(self._queue)

    def generate(self, messages: Sequence[Message]) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        with self._lock:
            self.calls.append([dict(m) for m in messages])
            if not self._queue:
                raise ScriptExhausted("scripted backend has no replies left")
            return self._queue.popleft()


class FunctionBackend:
    """Wraps ``fn(messages) -> str``; handy for scripted behaviours keyed on prompt content."""

    kind = "scripted"

    def __init__(self, fn: Callable[[Sequence[Message]], str], model_name: str = "function"):
        self.fn = fn
        self.model_name = model_name

    def generate(self, messages: Sequence[Message]) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        return self.fn(messages)


def backend_generate(backend: GenerationBackend, messages: Sequence[Message]) -> str:
    return backend.generate(messages)


def build_backend(spec: dict | None, env: dict | None = None) -> GenerationBackend:
    """Construct a backend from a config mapping.

    Credentials come only from the environment: ``api_key_env`` names the
    variable (default ``CRS_EVAL_API_KEY``); ``endpoint`` may be given directly
    or through ``endpoint_env``.
    """
    spec = dict(spec or {"kind": "stub"})
    env = os.environ if env is None else env
    if "api_key" in spec:
        raise ConfigError("credentials must come from environment variables, not config")
    kind = spec.get("kind", "stub")
    model = spec.get("model", "stub" if kind in ("stub", "deterministic_stub") else "gpt-3.5-turbo")
    if kind in ("stub", "deterministic_stub"):
        return StubBackend(model)
    if kind == "scripted":
        if "replay" in spec:
            return ScriptedBackend.from_file(spec["replay"], model)
        return ScriptedBackend(spec.get("replies", []), model)
    if kind == "remote_chat":
        endpoint = spec.get("endpoint") or env.get(spec.get("endpoint_env", "CRS_EVAL_ENDPOINT"), "")
        api_key = env.get(spec.get("api_key_env", "CRS_EVAL_API_KEY"))
        if not api_key:
            raise ConfigError("remote_chat backend requires credentials in "
                              f"${spec.get('api_key_env', 'CRS_EVAL_API_KEY')}")
        retry = RetryPolicy(max_attempts=int(spec.get("max_retries", 5)),
                            jitter=bool(spec.get("jitter", True)))
        return RemoteChatBackend(endpoint, model, api_key=api_key,
                                 temperature=float(spec.get("temperature", 0.0)),
                                 timeout=float(spec.get("timeout", 60.0)), retry=retry)
    raise ConfigError(f"unknown backend kind {kind!r}")


def parse_json_object(text: str) -> dict | None:
    """First JSON object in ``text`` (bare, fenced, or embedded), else None."""
    text = (text or "").strip()
    if not text:
        return None
    try:
        obj = json.loads(text)
        return obj if isinstance(obj, dict) else None
    except ValueError:
        pass
    start = text.find("{")
    end = text.rfind("}")
    if start == -1 or end <= start:
        return None
    try:
        obj = json.loads(text[start:end + 1])
    except ValueError:
        return None
    return obj if isinstance(obj, dict) else None


def generate_parsed(backend: GenerationBackend, messages: list[Message],
                    parse: Callable[[str], object], retries: int = 1,
                    error_cls: type[Exception] = ValueError, log_to: list | None = None):
    """Call the backend and parse; on failure re-ask with the error up to ``retries`` times.

    ``parse`` raises ``ValueError`` on bad output. Every prompt sent is appended
    to ``log_to`` when given.
    """
    attempt_msgs = list(messages)
    raw = ""
    for i in range(retries + 1):
        if log_to is not None:
            log_to.append([dict(m) for m in attempt_msgs])
        raw = backend.generate(attempt_msgs)
        try:
            return parse(raw)
        except ValueError as exc:
            reason = str(exc)
            attempt_msgs = list(messages) + [
                {"role": "assistant", "content": raw},
                {"role": "user", "content": f"That reply could not be parsed ({reason}). "
                                            "Reply again with only the JSON object in the requested format."},
            ]
    raise error_cls(f"unparseable backend output after {retries + 1} attempts", raw)
