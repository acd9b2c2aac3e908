"""Dialogue value types shared by agents and the engine."""

from __future__ import annotations

from dataclasses import dataclass, field

USER = "user"
RECOMMENDER = "system_recommender"
ROLES = (USER, RECOMMENDER)


@dataclass(frozen=True)
class Utterance:
    role: str
    turn: int
    text: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.text or not self.text.strip():
            raise ValueError("utterance text must be non-empty")

    def to_dict(self) -> dict:
        return {"role": self.role, "turn": self.turn, "text": self.text}

    @classmethod
    def from_dict(cls, obj: dict) -> "Utterance":
        return cls(obj["role"], int(obj["turn"]), obj["text"])


@dataclass
class DialogueContext:
    """D_t: alternating user/recommender utterances, user first."""

    user_id: str
    utterances: list[Utterance] = field(default_factory=list)

    @property
    def turn_count(self) -> int:
        return sum(1 for u in self.utterances if u.role == USER)

    def last_role(self) -> str | None:
        return self.utterances[-1].role if self.utterances else None

    def append(self, utt: Utterance) -> None:
        expected = USER if not self.utterances or self.utterances[-1].role == RECOMMENDER else RECOMMENDER
        if utt.role != expected:
            raise ValueError(f"alternation broken: expected {expected}, got {utt.role}")
        turn = self.turn_count + (1 if utt.role == USER else 0)
        if utt.turn != turn:
            raise ValueError(f"utterance turn {utt.turn} does not match dialogue turn {turn}")
        self.utterances.append(utt)


@dataclass(frozen=True)
class TurnResult:
    turn: int
    r_t: Utterance
    slate: tuple[str, ...]
    slate_seen: tuple[str, ...] = ()
    slate_unseen: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"turn": self.turn, "utterance": self.r_t.text, "slate": list(self.slate),
                "slate_seen": list(self.slate_seen), "slate_unseen": list(self.slate_unseen)}

    @classmethod
    def from_dict(cls, obj: dict) -> "TurnResult":
        t = int(obj["turn"])
        return cls(t, Utterance(RECOMMENDER, t, obj["utterance"]), tuple(obj["slate"]),
                   tuple(obj["slate_seen"]), tuple(obj["slate_unseen"]))


def check_alternation(utterances) -> None:
    for i, utt in enumerate(utterances):
        expected = ROLES[i % 2]
        if utt.role != expected:
            raise ValueError(f"utterance {i}: expected {expected}, got {utt.role}")
