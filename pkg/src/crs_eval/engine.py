"""Dialogue orchestration: one user at a time, or a cohort in parallel."""

from __future__ import annotations

import json
import logging
import math
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

from . import jsonl, render
from .agents import CrsAdapter, crs_turn, user_turn
from .backends import GenerationBackend
from .corpus import Catalog, UserRecord, UserSplit, restrict_history, split_user
from .dialogue import DialogueContext, TurnResult, Utterance, check_alternation
from .errors import ConfigError, LeakageError, SplitError
from .preference import (TARGET_BIASED, TARGET_FREE, BinaryPreference, GeneralPreference, PreferenceProfile,
                         PreferenceSettings, ReflectedPreference, extract_seen_preferences,
                         generate_general_preference, generate_target_biased_preference, reflect)
from .text import find_titles

log = logging.getLogger(__name__)

MODES = (TARGET_FREE, TARGET_BIASED)
COMPLETED = "completed"
ABORTED = "aborted"


@dataclass(frozen=True)
class SimulationConfig:
    mode: str = TARGET_FREE
    k: int = 4
    max_turns: int = 20
    n_targets: int = 5
    seed: int = 0
    reflection_window: int = 3
    target_fraction: float = 0.5
    split_strategy: str = "random"
    history_size: int | None = None
    inline_slates: bool = False
    narrative_budget: int = 200
    plot_limit: int = render.PLOT_LIMIT
    parse_retries: int = 1
    leak_min_title_len: int = 4
    prompt_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.max_turns < 1:
            problems.append("max_turns must be >= 1")
        if self.n_targets < 1:
            problems.append("n_targets must be >= 1")
        if not 0 < self.target_fraction <= 1:
            problems.append("target_fraction must be in (0, 1]")
        if self.reflection_window < 0:
            problems.append("reflection_window must be >= 0")
        if self.history_size is not None and self.history_size < 1:
            problems.append("history_size must be >= 1")
        if problems:
            raise ConfigError("invalid simulation config: " + "; ".join(problems))

    @property
    def reflection(self) -> bool:
        return self.mode == TARGET_FREE

    def settings(self) -> PreferenceSettings:
        return PreferenceSettings(parse_retries=self.parse_retries, narrative_budget=self.narrative_budget,
                                  plot_limit=self.plot_limit, leak_min_title_len=self.leak_min_title_len,
                                  prompt_dir=self.prompt_dir)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "SimulationConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown simulation keys: {unknown}")
        return cls(**obj)


@dataclass
class TurnRecord:
    user: Utterance
    result: TurnResult
    reflection: ReflectedPreference | None = None
    prompts: list = field(default_factory=list)

    def to_event(self) -> dict:
        return {"type": "turn", "turn": self.result.turn, "user": self.user.text,
                "crs": self.result.to_dict(),
                "reflection": self.reflection.to_dict() if self.reflection else None,
                "prompts": self.prompts}

    @classmethod
    def from_event(cls, ev: dict) -> "TurnRecord":
        t = int(ev["turn"])
        refl = ReflectedPreference.from_dict(ev["reflection"]) if ev.get("reflection") else None
        return cls(Utterance("user", t, ev["user"]), TurnResult.from_dict(ev["crs"]), refl,
                   ev.get("prompts", []))


@dataclass
class Transcript:
    user_id: str
    config: dict
    split: UserSplit
    general: GeneralPreference | None
    adapter: str = ""
    selected: tuple[str, ...] = ()
    residual: tuple[str, ...] = ()
    seen_prefs: list = field(default_factory=list)
    setup_prompts: list = field(default_factory=list)
    turns: list[TurnRecord] = field(default_factory=list)
    status: str = "running"
    reason: str = ""
    wall_clock: dict = field(default_factory=dict)

    @property
    def slates(self) -> list[tuple[str, ...]]:
        return [t.result.slate for t in self.turns]

    @property
    def reflections(self) -> list[ReflectedPreference]:
        return [t.reflection for t in self.turns if t.reflection is not None]

    def utterances(self) -> list[Utterance]:
        out = []
        for t in self.turns:
            out.extend([t.user, t.result.r_t])
        return out

    def header_event(self) -> dict:
        return {"type": "header", "user_id": self.user_id, "config": self.config,
                "split": self.split.to_dict(), "adapter": self.adapter,
                "general": self.general.to_dict() if self.general else None,
                "selected": list(self.selected), "residual": list(self.residual),
                "seen_prefs": self.seen_prefs, "prompts": self.setup_prompts}

    def end_event(self) -> dict:
        return {"type": "end", "status": self.status, "reason": self.reason, "turns": len(self.turns)}

    def prompt_texts(self) -> list[str]:
        """Every persisted simulator-side prompt message, flattened."""
        out = []
        for stage in self.setup_prompts:
            out.extend(m["content"] for m in stage["messages"])
        for t in self.turns:
            for stage in t.prompts:
                out.extend(m["content"] for m in stage["messages"])
        return out


def _stage(name: str, calls: list) -> list[dict]:
    return [{"stage": name, "messages": msgs} for msgs in calls]


def load_transcript(path) -> Transcript:
    """Read a transcript file, keeping only complete records.

    A truncated trailing line (crash mid-write) is ignored.
    """
    header, turns, end = None, [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.endswith("\n"):
                break
            try:
                ev = json.loads(line)
            except ValueError:
                break
            if ev["type"] == "header":
                header = ev
            elif ev["type"] == "turn":
                turns.append(TurnRecord.from_event(ev))
            elif ev["type"] == "end":
                end = ev
    if header is None:
        raise ValueError(f"{path}: no transcript header")
    tr = Transcript(
        user_id=header["user_id"], config=header["config"],
        split=UserSplit.from_dict(header["split"]),
        general=GeneralPreference.from_dict(header["general"]) if header["general"] else None,
        adapter=header.get("adapter", ""),
        selected=tuple(header.get("selected", ())), residual=tuple(header.get("residual", ())),
        seen_prefs=header.get("seen_prefs", []), setup_prompts=header.get("prompts", []),
        turns=turns)
    if end is not None:
        tr.status, tr.reason = end["status"], end["reason"]
    return tr


def load_transcripts(directory) -> list[Transcript]:
    return [load_transcript(p) for p in sorted(Path(directory).glob("*.jsonl"))]


def _complete_lines(path: Path) -> list[str]:
    lines = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.endswith("\n"):
                break
            try:
                ev = json.loads(line)
            except ValueError:
                break
            if ev.get("type") == "end":
                break
            lines.append(line)
    return lines


def setup_target_biased(user: UserRecord, split: UserSplit, catalog: Catalog, backend: GenerationBackend,
                        fraction: float = 0.5, seed: int = 0, *, settings: PreferenceSettings | None = None,
                        log_to: list | None = None):
    """Initialize a target-biased simulator from a seeded sample of the targets.

    Returns ``(general, selected, residual)``; ``selected`` holds
    ceil(fraction * |targets|) items.
    """
    targets = list(split.targets)
    if len(targets) < 2:
        raise SplitError(f"user {user.user_id}: target-biased setup needs >= 2 targets")
    n_sel = math.ceil(fraction * len(targets) - 1e-9)
    rng = random.Random(f"biased/{seed}/{user.user_id}")
    chosen = set(rng.sample(targets, n_sel))
    selected = tuple(t for t in targets if t in chosen)
    residual = tuple(t for t in targets if t not in chosen)
    general = generate_target_biased_preference(
        [catalog[i] for i in selected], backend, user_id=user.user_id,
        settings=settings or PreferenceSettings(), log_to=log_to)
    return general, selected, residual


def make_split(user: UserRecord, config: SimulationConfig) -> UserSplit:
    split = split_user(user, config.n_targets, config.seed, config.split_strategy)
    if config.history_size is not None:
        if len(split.seen) < config.history_size:
            raise SplitError(f"user {user.user_id}: only {len(split.seen)} seen items, "
                             f"history_size={config.history_size}")
        split = restrict_history(split, config.history_size)
    return split


def run_dialogue(user: UserRecord, split: UserSplit, config: SimulationConfig, backend: GenerationBackend,
                 adapter: CrsAdapter, catalog: Catalog, *, out_path=None, resume: bool = False,
                 fsync: bool = True, on_turn: Callable[[int], None] | None = None) -> Transcript:
    """Simulate one dialogue of ``config.max_turns`` turns.

    Each completed turn is appended to ``out_path`` before the next begins. With
    ``resume``, an existing partial file is continued after its last complete
    turn; its bytes up to that point are kept as they are.
    """
    if split.user_id != user.user_id:
        raise SplitError("split does not belong to user")
    if not set(split.seen) | set(split.targets) <= set(user.item_ids):
        raise SplitError(f"user {user.user_id}: split references items outside the history")
    settings = config.settings()
    started = time.time()
    out_path = Path(out_path) if out_path is not None else None
    snapshot = config.to_dict()

    existing: Transcript | None = None
    kept_lines: list[str] = []
    if resume and out_path is not None and out_path.exists():
        existing = load_transcript(out_path)
        if existing.config != snapshot or existing.split != split:
            raise ConfigError(f"{out_path}: cannot resume, config or split differs")
        if existing.status == COMPLETED:
            return existing
        if existing.general is None:
            existing = None
        else:
            kept_lines = _complete_lines(out_path)
            existing.status, existing.reason = "running", ""

    writer = None
    if out_path is not None:
        writer = jsonl.Appender(out_path, mode="w", fsync=fsync)
        for line in kept_lines:
            writer.write_raw(line)

    tr = existing or Transcript(user.user_id, snapshot, split, None, adapter=adapter.name)
    target_titles = {t: catalog[t].title for t in split.targets}
    try:
        if existing is None:
            calls: list = []
            if config.mode == TARGET_FREE:
                seen_prefs = extract_seen_preferences(user, split, catalog, backend,
                                                      settings=settings, log_to=calls)
                setup = _stage("extract_preferences", calls)
                calls = []
                tr.general = generate_general_preference(
                    list(seen_prefs.values()), [catalog[i] for i in split.seen], backend,
                    user_id=user.user_id, forbidden_titles=target_titles.values(),
                    targets=split.targets, settings=settings, log_to=calls)
                tr.seen_prefs = [p.to_dict() for p in seen_prefs.values()]
                tr.setup_prompts = setup + _stage("general_preferences", calls)
            else:
                tr.general, tr.selected, tr.residual = setup_target_biased(
                    user, split, catalog, backend, config.target_fraction, config.seed,
                    settings=settings, log_to=calls)
                tr.setup_prompts = _stage("target_biased_preferences", calls)
            if writer:
                writer.append(tr.header_event())
        _loop(tr, user, split, config, backend, adapter, catalog, settings, target_titles, writer, on_turn)
        tr.status = COMPLETED
    except Exception as exc:  # any agent failure ends this dialogue only
        tr.status = ABORTED
        tr.reason = f"{type(exc).__name__}: {exc}"
        log.warning("user %s aborted after %d turns: %s", user.user_id, len(tr.turns), tr.reason)
        if writer and tr.general is None:
            writer.append(tr.header_event())
    finally:
        if writer:
            if tr.status != "running":
                writer.append(tr.end_event())
            writer.close()
    tr.wall_clock = {"started": started, "finished": time.time()}
    return tr


def _disclosed(catalog: Catalog, target_titles: dict, result: TurnResult, min_len: int) -> set[str]:
    out = {t for t in result.slate if t in target_titles}
    for t in find_titles(result.r_t.text, list(target_titles.values()), min_len):
        out.update(i for i, title in target_titles.items() if title == t)
    return out


def _loop(tr: Transcript, user, split, config: SimulationConfig, backend, adapter, catalog,
          settings, target_titles, writer, on_turn) -> None:
    profile = PreferenceProfile(user.user_id, tr.general)
    profile.seen_prefs = {p["item_id"]: BinaryPreference.from_dict(p) for p in tr.seen_prefs}
    context = DialogueContext(user.user_id)
    disclosed: set[str] = set()
    slates = []
    for rec in tr.turns:
        context.append(rec.user)
        context.append(rec.result.r_t)
        slates.append(rec.result.slate)
        if rec.reflection is not None:
            profile.reflections.append(rec.reflection)
        disclosed |= _disclosed(catalog, target_titles, rec.result, settings.leak_min_title_len)

    for turn in range(len(tr.turns) + 1, config.max_turns + 1):
        if config.mode == TARGET_FREE:
            forbidden = [title for i, title in target_titles.items() if i not in disclosed]
        else:
            forbidden = []
        calls: list = []
        u_t = user_turn(profile, context, profile.reflections, backend, user=user, catalog=catalog,
                        last_slate=slates[-1] if slates else (),
                        reflection_window=config.reflection_window, forbidden_titles=forbidden,
                        settings=settings, log_to=calls)
        stage_prompts = _stage("user_opening" if turn == 1 else "user_response", calls)
        result = crs_turn(adapter, context, u_t, split.seen,
                          slates=slates if config.inline_slates else None)
        context.append(u_t)
        context.append(result.r_t)
        slates.append(result.slate)
        disclosed |= _disclosed(catalog, target_titles, result, settings.leak_min_title_len)
        reflection = None
        if config.reflection and turn >= 2:
            calls = []
            reflection = reflect([catalog[i] for i in result.slate], split, user, tr.general, turn,
                                 backend, seen_prefs=profile.seen_prefs,
                                 dialogue_history=render.dialogue_block(context.utterances),
                                 settings=settings, log_to=calls)
            if forbidden:
                # titles on the current slate are disclosed by the CRS; anything else is a leak
                still = [t for i, t in target_titles.items() if i not in disclosed]
                for msgs in calls:
                    hits = find_titles("\n".join(m["content"] for m in msgs), still,
                                       settings.leak_min_title_len)
                    if hits:
                        raise LeakageError(f"reflection prompt at turn {turn} names {hits}", hits)
            stage_prompts += _stage("reflect", calls)
            profile.reflections.append(reflection)
        rec = TurnRecord(u_t, result, reflection, stage_prompts)
        tr.turns.append(rec)
        if writer:
            writer.append(rec.to_event())
        if on_turn is not None:
            on_turn(turn)


@dataclass
class CohortResult:
    transcripts: list[Transcript]
    failures: dict[str, str]
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def completed(self) -> list[Transcript]:
        return [t for t in self.transcripts if t.status == COMPLETED]


def run_cohort(users: Sequence[UserRecord], config: SimulationConfig, backend, adapter, catalog: Catalog, *,
               parallelism: int = 1, splits: dict[str, UserSplit] | None = None, out_dir=None,
               resume: bool = False, fsync: bool = True) -> CohortResult:
    """Run one dialogue per user; failures stay isolated to their user.

    ``backend`` and ``adapter`` may be shared instances or callables taking a
    user id, for stateful scripted agents.
    """
    if parallelism < 1:
        raise ConfigError("parallelism must be >= 1")
    out_dir = Path(out_dir) if out_dir is not None else None
    failures: dict[str, str] = {}

    def one(user: UserRecord):
        try:
            split = splits[user.user_id] if splits else make_split(user, config)
            be = backend(user.user_id) if callable(backend) and not hasattr(backend, "generate") else backend
            ad = adapter(user.user_id) if callable(adapter) and not hasattr(adapter, "recommend") else adapter
        except Exception as exc:
            return user.user_id, None, f"{type(exc).__name__}: {exc}"
        path = out_dir / f"{user.user_id}.jsonl" if out_dir is not None else None
        tr = run_dialogue(user, split, config, be, ad, catalog, out_path=path, resume=resume, fsync=fsync)
        return user.user_id, tr, tr.reason if tr.status != COMPLETED else None

    if parallelism == 1:
        results = [one(u) for u in users]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(one, users))
    transcripts = []
    timing = {}
    for user_id, tr, err in results:
        if err is not None:
            failures[user_id] = err
        if tr is not None:
            transcripts.append(tr)
            timing[user_id] = tr.wall_clock.get("finished", 0) - tr.wall_clock.get("started", 0)
    return CohortResult(transcripts, failures, timing)


def check_transcript(tr: Transcript, k: int | None = None) -> None:
    """Raise AssertionError if a stored transcript breaks a structural invariant."""
    check_alternation(tr.utterances())
    seen = set(tr.split.seen)
    k = k if k is not None else tr.config.get("k")
    for i, rec in enumerate(tr.turns, start=1):
        r = rec.result
        assert r.turn == i and rec.user.turn == i, f"turn numbering broken at {i}"
        assert len(r.slate) == k and len(set(r.slate)) == k, f"turn {i}: slate size"
        assert set(r.slate_seen) == set(r.slate) & seen, f"turn {i}: slate_seen"
        assert set(r.slate_unseen) == set(r.slate) - seen, f"turn {i}: slate_unseen"
        if rec.reflection is not None:
            assert [p.item_id for p in rec.reflection.per_item] == list(r.slate), f"turn {i}: reflection ids"
            for p in rec.reflection.per_item:
                expected = "review_recap" if p.item_id in seen else "reflected_on_unseen"
                assert p.source == expected, f"turn {i}: reflection source"
    n_refl = len(tr.reflections)
    if tr.config.get("mode") == TARGET_BIASED:
        assert n_refl == 0, "target-biased transcript has reflections"
    else:
        assert n_refl == max(0, len(tr.turns) - 1), "reflection count"
    if tr.status == COMPLETED:
        assert len(tr.turns) == tr.config["max_turns"], "completed run has wrong turn count"
