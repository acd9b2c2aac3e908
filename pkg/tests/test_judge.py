import json

import pytest

from crs_eval.backends import ScriptedBackend, StubBackend
from crs_eval.corpus import UserSplit
from crs_eval.dialogue import RECOMMENDER, USER, TurnResult, Utterance
from crs_eval.engine import Transcript, TurnRecord
from crs_eval.errors import JudgeParseError
from crs_eval.judge import JudgeScores, aggregate_judgments, judge_transcript, parse_scores
from crs_eval.preference import GeneralPreference

GENERAL = GeneralPreference("u", "I love quiet character dramas.", ("m1",))


def reply(p, c, s):
    return json.dumps({"proactiveness": {"rationale": "asks", "score": p},
                       "coherence": {"rationale": "flows", "score": c},
                       "personalization": {"rationale": "fits", "score": s}})


def transcript(user_id="u", turns=2):
    tr = Transcript(user_id, {"k": 2, "max_turns": turns}, UserSplit(user_id, ("m1",), ("m2",), 0), GENERAL)
    for t in range(1, turns + 1):
        tr.turns.append(TurnRecord(Utterance(USER, t, f"request {t}"),
                                   TurnResult(t, Utterance(RECOMMENDER, t, f"suggestion {t}"), ("m3", "m4"))))
    return tr


def test_fixed_scores_persisted():
    log = []
    s = judge_transcript(transcript(), GENERAL, ScriptedBackend([reply(4, 5, 3)]), log_to=log)
    assert (s.proactiveness, s.coherence, s.personalization) == (4, 5, 3)
    assert JudgeScores.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    prompt = "\n".join(m["content"] for m in log[0])
    assert "I love quiet character dramas." in prompt
    assert "User: request 1" in prompt and "Recommender: suggestion 2" in prompt
    assert "Proactiveness" in prompt and "Personalization" in prompt


def test_out_of_range_raises_after_one_retry():
    be = ScriptedBackend([reply(6, 5, 3), reply(4, 0, 3), reply(4, 4, 4)])
    with pytest.raises(JudgeParseError) as info:
        judge_transcript(transcript(), GENERAL, be)
    assert len(be.calls) == 2 and be.remaining() == 1
    assert '"score": 0' in info.value.raw


def test_retry_recovers():
    be = ScriptedBackend(["no idea", reply(2, 2, 2)])
    assert judge_transcript(transcript(), GENERAL, be).coherence == 2


@pytest.mark.parametrize("bad", [reply(4.0, 5, 3), reply("4", 5, 3), reply(True, 5, 3),
                                 '{"proactiveness": {"score": 4}}', "text"])
def test_parse_never_coerces(bad):
    with pytest.raises(ValueError):
        parse_scores(bad)


def test_needs_a_turn():
    with pytest.raises(ValueError):
        judge_transcript(transcript(turns=0), GENERAL, StubBackend())


def test_stub_judge_is_deterministic():
    a = judge_transcript(transcript(), GENERAL, StubBackend())
    assert a == judge_transcript(transcript(), GENERAL, StubBackend())


def test_aggregate_examples():
    def js(p, c=3, s=3):
        return JudgeScores("u", p, c, s)
    assert aggregate_judgments([js(3), js(5)])["proactiveness"]["mean"] == 4.0
    single = aggregate_judgments([js(2)])
    assert single["proactiveness"] == {"mean": 2.0, "std": 0.0, "n": 1}
    fives = aggregate_judgments([js(5, 5, 5)] * 7)
    assert all(fives[d] == {"mean": 5.0, "std": 0.0, "n": 7} for d in fives)
    with pytest.raises(ValueError):
        aggregate_judgments([])


def test_scores_validate():
    with pytest.raises(ValueError):
        JudgeScores("u", 0, 3, 3)
