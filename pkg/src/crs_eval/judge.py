"""Rubric-based 1-5 scoring of dialogues for proactiveness, coherence and personalization."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Sequence

from . import prompts, render
from .backends import GenerationBackend, generate_parsed, parse_json_object
from .errors import JudgeParseError

DIMENSIONS = ("proactiveness", "coherence", "personalization")


@dataclass(frozen=True)
class JudgeScores:
    user_id: str
    proactiveness: int
    coherence: int
    personalization: int
    rationale: dict = field(default_factory=dict)
    judge_model: str = ""

    def __post_init__(self):
        for dim in DIMENSIONS:
            v = getattr(self, dim)
            if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 5:
                raise ValueError(f"{dim} score {v!r} not an integer in 1..5")

    def to_dict(self) -> dict:
        return {"user_id": self.user_id, **{d: getattr(self, d) for d in DIMENSIONS},
                "rationale": dict(self.rationale), "judge_model": self.judge_model}

    @classmethod
    def from_dict(cls, obj: dict) -> "JudgeScores":
        return cls(obj["user_id"], *(obj[d] for d in DIMENSIONS), obj.get("rationale", {}),
                   obj.get("judge_model", ""))


def parse_scores(raw: str) -> tuple[dict[str, int], dict[str, str]]:
    """Strict: each dimension needs an integer score in 1..5; nothing is coerced."""
    obj = parse_json_object(raw)
    if obj is None:
        raise ValueError("no JSON object found")
    scores, rationale = {}, {}
    for dim in DIMENSIONS:
        entry = obj.get(dim)
        if not isinstance(entry, dict) or "score" not in entry:
            raise ValueError(f"missing {dim}.score")
        score = entry["score"]
        if isinstance(score, bool) or not isinstance(score, int):
            raise ValueError(f"{dim}.score must be an integer, got {score!r}")
        if not 1 <= score <= 5:
            raise ValueError(f"{dim}.score {score} outside 1..5")
        scores[dim] = score
        rationale[dim] = str(entry.get("rationale", ""))
    return scores, rationale


def judge_messages(transcript, general_narrative: str, prompt_dir=None) -> list[dict]:
    return prompts.render("judge", {
        "rubric_proactiveness": prompts.load_template("rubric_proactiveness", prompt_dir).strip(),
        "rubric_coherence": prompts.load_template("rubric_coherence", prompt_dir).strip(),
        "rubric_personalization": prompts.load_template("rubric_personalization", prompt_dir).strip(),
        "general_preferences": general_narrative,
        "dialogue": render.dialogue_block(transcript.utterances()),
    }, prompt_dir)


def judge_transcript(transcript, general, backend: GenerationBackend, *, retries: int = 1,
                     prompt_dir=None, log_to: list | None = None) -> JudgeScores:
    """Score one dialogue with a single joint call; one retry on a bad reply."""
    if not transcript.turns:
        raise ValueError(f"transcript {transcript.user_id} has no complete turn")
    narrative = general.narrative if hasattr(general, "narrative") else str(general)
    messages = judge_messages(transcript, narrative, prompt_dir)
    scores, rationale = generate_parsed(backend, messages, parse_scores, retries=retries,
                                        error_cls=JudgeParseError, log_to=log_to)
    return JudgeScores(transcript.user_id, scores["proactiveness"], scores["coherence"],
                       scores["personalization"], rationale, backend.model_name)


def aggregate_judgments(judgments: Sequence[JudgeScores]) -> dict[str, dict]:
    """Per-dimension mean and population standard deviation."""
    if not judgments:
        raise ValueError("no judgments to aggregate")
    out = {}
    for dim in DIMENSIONS:
        values = [getattr(j, dim) for j in judgments]
        out[dim] = {"mean": statistics.fmean(values), "std": statistics.pstdev(values),
                    "n": len(values)}
    return out
