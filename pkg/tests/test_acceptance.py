"""Acceptance criteria 1-10, one test each.

Every test records a single PASS/FAIL line (with its runtime); the lines are
printed together at the end of the pytest run.
"""

import contextlib
import json
import math
import random
import statistics
import time
from fractions import Fraction

import httpx
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from crs_eval import metrics, toy
from crs_eval.agents import KeywordAdapter, PopularityAdapter, RandomAdapter, RemoteHttpAdapter, crs_turn
from crs_eval.backends import FunctionBackend, RemoteChatBackend, RetryPolicy, ScriptedBackend, StubBackend
from crs_eval.corpus import interaction_counts
from crs_eval.dialogue import USER, DialogueContext, Utterance
from crs_eval.engine import (COMPLETED, SimulationConfig, check_transcript, load_transcript, make_split,
                             run_cohort, run_dialogue, setup_target_biased)
from crs_eval.errors import AdapterContractViolation, JudgeParseError
from crs_eval.judge import aggregate_judgments, judge_transcript
from crs_eval.metrics import PairwiseSubject, pairwise_accuracy
from crs_eval.prompts import task_of
from crs_eval.text import find_titles

from conftest import make_item

RESULTS: dict[int, str] = {}
STUB = StubBackend()


@contextlib.contextmanager
def criterion(n, label, limit=None):
    start = time.perf_counter()
    ok = False
    try:
        yield
        elapsed = time.perf_counter() - start
        if limit is not None:
            assert elapsed < limit, f"took {elapsed:.2f}s, limit {limit}s"
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        bound = f" (limit {limit:g}s)" if limit is not None else ""
        line = f"AC{n:<2} {'PASS' if ok else 'FAIL'}  {label}  [{elapsed:.2f}s{bound}]"
        RESULTS[n] = line
        print(line)


# -- independent oracles ------------------------------------------------------

def oracle_pc(slates, targets, t):
    """Materialize the cumulative union for each user and average the covered fractions."""
    total = Fraction(0)
    for u, user_slates in slates.items():
        union = set()
        for slate in user_slates[:t]:
            union = union | set(slate)
        total += Fraction(len(union & set(targets[u])), len(set(targets[u])))
    return total / len(slates)


def random_fixture(rng):
    universe = [f"i{n}" for n in range(50)]
    n_users, n_turns = rng.randint(1, 10), rng.randint(1, 20)
    slates = {f"u{u}": [tuple(rng.sample(universe, 4)) for _ in range(n_turns)] for u in range(n_users)}
    targets = {u: tuple(rng.sample(universe, rng.randint(1, 8))) for u in slates}
    return slates, targets, n_turns


# -- 1 ----------------------------------------------------------------------

def test_ac1_pc_pcir_oracle_equivalence():
    with criterion(1, "PC/PCIR match brute-force cumulative union on 1,000 random transcripts", limit=5):
        rng = random.Random(20240601)
        for _ in range(1000):
            slates, targets, n_turns = random_fixture(rng)
            expected = [oracle_pc(slates, targets, t) for t in range(1, n_turns + 1)]
            series = metrics.pc_series(slates, targets)
            assert series == expected
            assert metrics.pcir(series) == [b - a for a, b in zip([Fraction(0)] + expected, expected)]
            t = rng.randint(1, n_turns)
            assert metrics.pc(slates, targets, t) == float(expected[t - 1])


# -- 2 ----------------------------------------------------------------------

ITEMS = [f"i{n}" for n in range(30)]


@st.composite
def transcripts(draw):
    n_users = draw(st.integers(1, 6))
    n_turns = draw(st.integers(1, 20))
    k = draw(st.integers(1, 6))
    slates, targets = {}, {}
    for u in range(n_users):
        slate = st.lists(st.sampled_from(ITEMS), min_size=k, max_size=k, unique=True)
        slates[f"u{u}"] = [tuple(draw(slate)) for _ in range(n_turns)]
        targets[f"u{u}"] = tuple(draw(st.sets(st.sampled_from(ITEMS), min_size=1, max_size=8)))
    return slates, targets, n_turns, k


LAW_SETTINGS = settings(max_examples=300, deadline=None, derandomize=True,
                        suppress_health_check=[HealthCheck.too_slow])


@LAW_SETTINGS
@given(transcripts())
def _metric_laws(fixture):
    slates, targets, n_turns, k = fixture
    pcs = metrics.pc_series(slates, targets)
    floats = [float(v) for v in pcs]
    incs = [float(v) for v in metrics.pcir(pcs)]
    assert all(0 <= v <= 1 for v in floats)
    assert all(b >= a for a, b in zip(floats, floats[1:]))
    assert all(v >= 0 for v in incs)
    assert abs(math.fsum(incs) - floats[-1]) <= 1e-12
    assert abs(sum(incs) - floats[-1]) <= 1e-12
    for t in range(1, n_turns + 1):
        assert 0 <= metrics.recall_at(slates, targets, t, k) <= 1
    t = n_turns
    repeated = {u: s + [s[-1]] for u, s in slates.items()}
    assert metrics.pc(repeated, targets, t + 1) == metrics.pc(repeated, targets, t)
    assert metrics.recall_at(repeated, targets, t + 1, k) == metrics.recall_at(repeated, targets, t, k)


def test_ac2_metric_laws():
    with criterion(2, "metric laws: monotone PC, PCIR >= 0, telescoping, bounds, repetition", limit=10):
        _metric_laws()


# -- 3 ----------------------------------------------------------------------

def test_ac3_worked_examples():
    with criterion(3, "hand-worked PC / PCIR / Recall examples reproduce exactly"):
        y = {"u": ("a", "b", "c", "d")}
        slates = {"u": [("a", "x", "y", "z"), ("x", "b", "a", "w")]}
        assert metrics.pc(slates, y, 1) == 0.25
        assert metrics.pc(slates, y, 2) == 0.5
        two = {"u1": [("a",), ("z",), ("b",)], "u2": [("e",), ("z",), ("f",)]}
        assert metrics.pc(two, {"u1": ("a", "b", "c", "d"), "u2": ("e", "f")}, 3) == 0.75
        assert metrics.pcir([0.25, 0.5, 0.5]) == [0.25, 0.25, 0.0]
        assert metrics.recall_at({"u": [("a", "x", "b", "w")]}, y, 1, 2) == 0.25


# -- 4 and 7: the stub end-to-end run ------------------------------------------

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    catalog = toy.make_catalog(60, seed=0)
    users = toy.make_users(catalog, 10, seed=0)
    adapter = PopularityAdapter(catalog, interaction_counts(users), k=4)
    cfg = SimulationConfig(mode="target_free", k=4, max_turns=20, seed=0)
    root = tmp_path_factory.mktemp("e2e")
    start = time.perf_counter()
    first = run_cohort(users, cfg, STUB, adapter, catalog, parallelism=1, out_dir=root / "a")
    elapsed = time.perf_counter() - start
    return catalog, users, adapter, cfg, root, first, elapsed


def test_ac4_end_to_end_stub_run(e2e):
    catalog, users, adapter, cfg, root, first, elapsed = e2e
    with criterion(4, "10 users x 20 turns x K=4 stub run: invariants + byte-identical reruns", limit=5):
        assert elapsed < 5, f"first run took {elapsed:.2f}s"
        assert first.failures == {} and len(first.completed) == 10
        for tr in first.transcripts:
            check_transcript(tr, 4)
            assert len(tr.turns) == 20 and len(tr.reflections) == 19
        again = run_cohort(users, cfg, STUB, adapter, catalog, parallelism=1, out_dir=root / "b")
        wide = run_cohort(users, cfg, STUB, adapter, catalog, parallelism=8, out_dir=root / "c")
        assert again.failures == wide.failures == {}
        names = sorted(p.name for p in (root / "a").iterdir())
        assert len(names) == 10
        for name in names:
            ref = (root / "a" / name).read_bytes()
            assert (root / "b" / name).read_bytes() == ref
            assert (root / "c" / name).read_bytes() == ref
            check_transcript(load_transcript(root / "a" / name), 4)


def test_ac7_leakage_freedom(e2e):
    catalog, users, adapter, cfg, root, first, elapsed = e2e
    with criterion(7, "no target title in any simulator-side prompt or narrative (stub run)"):
        scanned = 0
        for path in sorted((root / "a").iterdir()):
            events = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
            header = events[0]
            titles = {t: catalog[t].title for t in header["split"]["targets"]}
            # the narrative and every setup prompt must be free of all target titles
            assert find_titles(header["general"]["narrative"], titles.values()) == []
            for stage in header["prompts"]:
                for m in stage["messages"]:
                    assert find_titles(m["content"], titles.values()) == [], stage["stage"]
                    scanned += 1
            disclosed = set()
            for ev in events[1:]:
                if ev["type"] != "turn":
                    continue
                # a title the recommender itself surfaced may be discussed afterwards
                disclosed |= {t for t in ev["crs"]["slate"] if t in titles}
                disclosed |= {t for t, title in titles.items()
                              if find_titles(ev["crs"]["utterance"], [title])}
                hidden = [title for t, title in titles.items() if t not in disclosed]
                assert find_titles(ev["user"], hidden) == []
                for stage in ev["prompts"]:
                    for m in stage["messages"]:
                        if m["role"] == "assistant":
                            continue
                        assert find_titles(m["content"], hidden) == [], (path.name, ev["turn"], stage["stage"])
                        scanned += 1
        assert scanned > 1000


# -- 5 ----------------------------------------------------------------------

def leaky_user(titles_in_order):
    """Simulator that names one 'remembered' target title per turn."""
    state = {"turn": 0}

    def fn(messages):
        task = task_of(messages)
        if task in ("user_opening", "user_response"):
            title = titles_in_order[state["turn"] % len(titles_in_order)]
            state["turn"] += 1
            return f"Honestly I just want to watch {title} again."
        return STUB.generate(messages)
    return FunctionBackend(fn)


def trivial_user(messages):
    task = task_of(messages)
    if task in ("user_opening", "user_response"):
        return "Show me something."
    return STUB.generate(messages)


def test_ac5_bias_mechanism():
    with criterion(5, "bias demo: leaky sim + keyword CRS vs popularity; symmetric control sign test"):
        catalog = toy.make_catalog(60, seed=1)
        users = toy.make_users(catalog, 10, seed=1)
        counts = interaction_counts(users)
        pop = PopularityAdapter(catalog, counts, k=4)
        cfg = SimulationConfig(mode="target_biased", k=4, max_turns=10, n_targets=5, seed=0)
        keyword = KeywordAdapter(catalog, fallback=pop.ranking, k=4)
        selected = {}
        for u in users:
            selected[u.user_id] = setup_target_biased(u, make_split(u, cfg), catalog, STUB, 0.5, 0)[1]
        leaky = run_cohort(users, cfg, lambda uid: leaky_user([catalog[i].title for i in selected[uid]]),
                           keyword, catalog)
        base = run_cohort(users, cfg, STUB, pop, catalog)
        assert leaky.failures == base.failures == {}
        assert all(tr.selected == selected[tr.user_id] for tr in leaky.transcripts)
        n_sel = len(next(iter(selected.values())))
        assert all(len(s) == n_sel for s in selected.values())
        bias = metrics.bias_from_transcripts(leaky.transcripts)
        baseline = metrics.bias_from_transcripts(base.transcripts)
        assert bias.pc_selected[n_sel - 1] == 1
        assert all(r <= b for r, b in zip(bias.pc_residual, baseline.pc_residual))
        print(f"    leaky selected PC@{cfg.max_turns}={float(bias.pc_selected[-1]):.3f} "
              f"residual={float(bias.pc_residual[-1]):.3f}  popularity residual={float(baseline.pc_residual[-1]):.3f}")

        # symmetric control: a random CRS cannot tell selected from residual
        diffs = []
        ctl_users = users[:6]
        ctl_backend = FunctionBackend(trivial_user)
        for seed in range(100):
            ctl_cfg = SimulationConfig(mode="target_biased", k=4, max_turns=8, n_targets=4, seed=seed)
            res = run_cohort(ctl_users, ctl_cfg, ctl_backend, RandomAdapter(catalog, 4, seed=seed), catalog)
            assert res.failures == {}
            assert all(len(t.selected) == len(t.residual) == 2 for t in res.transcripts)
            rep = metrics.bias_from_transcripts(res.transcripts)
            diffs.append(float(sum(rep.pc_selected) - sum(rep.pc_residual)))
        pos, neg, p = metrics.sign_test(diffs)
        print(f"    symmetric control: {pos} positive, {neg} negative, sign-test p={p:.3f}")
        assert p >= 0.01


# -- 6 ----------------------------------------------------------------------

def test_ac6_pairwise_harness():
    with criterion(6, "pairwise: oracle 1.0, random 0.5 +/- 0.02 over 10,000 pairs, ties excluded"):
        rng = random.Random(7)
        subjects = []
        for n in range(10000):
            ra, rb = rng.sample(range(1, 11), 2)
            subjects.append(PairwiseSubject(f"u{n}", {"general_prefs": "x"},
                                            [(make_item(f"a{n}"), ra), (make_item(f"b{n}"), rb)]))
        ratings = {}
        for s in subjects:
            for item, r in s.rated:
                ratings[item.item_id] = r

        def oracle(profile, pair):
            return 0 if ratings[pair[0].item_id] > ratings[pair[1].item_id] else 1

        assert pairwise_accuracy(subjects, "general_prefs", selector=oracle).accuracy == 1.0
        coin = random.Random(11)
        rep = pairwise_accuracy(subjects, "general_prefs", selector=lambda p, pair: coin.randrange(2))
        assert rep.n_pairs == 10000
        assert abs(rep.accuracy - 0.5) <= 0.02

        # 6 items with ratings 5,5,5,7,7,9: ties = C(3,2) + C(2,2) = 4 of C(6,2) = 15 pairs
        tied = PairwiseSubject("t", {"general_prefs": "x"},
                               [(make_item(f"t{i}"), r) for i, r in enumerate([5, 5, 5, 7, 7, 9])])
        calls = []

        def spy(profile, pair):
            calls.append(pair)
            assert ratings_t[pair[0].item_id] != ratings_t[pair[1].item_id]
            return 0

        ratings_t = {item.item_id: r for item, r in tied.rated}
        rep = pairwise_accuracy([tied], "general_prefs", selector=spy)
        assert rep.n_ties_excluded == 4 and rep.n_pairs == 11 and len(calls) == 11

        # reported, not asserted: the harness with the offline stub on a toy corpus
        from crs_eval.cli import build_pairwise_subjects
        catalog = toy.make_catalog(60, seed=0)
        users = toy.make_users(catalog, 10, seed=0)
        subj = build_pairwise_subjects(users, catalog, STUB, 5, 0)
        for variant in ("raw_reviews", "binary_prefs", "general_prefs"):
            r = pairwise_accuracy(subj, variant, STUB)
            print(f"    stub {variant}: accuracy {r.accuracy:.3f} over {r.n_pairs} pairs")


# -- 8 ----------------------------------------------------------------------

def test_ac8_wire_contracts():
    with criterion(8, "wire fixtures: chat-completions shape, 429 backoff, CRS protocol, short slate"):
        requests, sleeps = [], []
        replies = [httpx.Response(429), httpx.Response(429),
                   httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})]

        def chat(request):
            requests.append(request)
            return replies.pop(0)

        be = RemoteChatBackend("https://llm.test/v1", "gpt-3.5-turbo", api_key="sk-test",
                               client=httpx.Client(transport=httpx.MockTransport(chat)),
                               retry=RetryPolicy(sleep=sleeps.append))
        msgs = [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}]
        assert be.generate(msgs) == "ok"
        assert sleeps == [1.0, 2.0] and len(requests) == 3
        for req in requests:
            assert str(req.url) == "https://llm.test/v1/chat/completions"
            assert json.loads(req.content) == {"model": "gpt-3.5-turbo", "messages": msgs, "temperature": 0.0}

        catalog = toy.make_catalog(20, seed=0)
        ids = catalog.ids()
        bodies = []

        def crs(request):
            bodies.append(json.loads(request.content))
            n = 4 if len(bodies) == 1 else 3
            return httpx.Response(200, json={"utterance": "try these", "items": ids[:n]})

        ad = RemoteHttpAdapter("https://crs.test/v1/recommend", catalog, k=4,
                               client=httpx.Client(transport=httpx.MockTransport(crs)))
        r = crs_turn(ad, DialogueContext("u"), Utterance(USER, 1, "a thriller please"))
        assert bodies[0] == {"protocol": "crs-sim/1", "k": 4,
                             "dialogue": [{"role": "user", "text": "a thriller please"}]}
        assert list(r.slate) == ids[:4]
        ctx = DialogueContext("u")
        ctx.append(Utterance(USER, 1, "a thriller please"))
        ctx.append(r.r_t)
        with pytest.raises(AdapterContractViolation):
            crs_turn(ad, ctx, Utterance(USER, 2, "more"))
        assert len(bodies[1]["dialogue"]) == 3


# -- 9 ----------------------------------------------------------------------

class Killed(BaseException):
    pass


def test_ac9_crash_resume(tmp_path):
    with criterion(9, "kill after turn 7 then resume: 20 turns, first 7 byte-identical"):
        catalog = toy.make_catalog(60, seed=0)
        users = toy.make_users(catalog, 3, seed=0)
        adapter = PopularityAdapter(catalog, interaction_counts(users), k=4)
        cfg = SimulationConfig(max_turns=20)
        user = users[0]
        split = make_split(user, cfg)
        path = tmp_path / "u.jsonl"

        def kill(turn):
            if turn == 7:
                raise Killed()

        with pytest.raises(Killed):
            run_dialogue(user, split, cfg, STUB, adapter, catalog, out_path=path, on_turn=kill)
        pre = path.read_bytes()
        pre_lines = pre.splitlines(keepends=True)
        assert len(pre_lines) == 8  # header + 7 turns, no end event
        tr = run_dialogue(user, split, cfg, STUB, adapter, catalog, out_path=path, resume=True)
        assert tr.status == COMPLETED and len(tr.turns) == 20
        post_lines = path.read_bytes().splitlines(keepends=True)
        assert post_lines[:8] == pre_lines
        reread = load_transcript(path)
        assert len(reread.turns) == 20
        check_transcript(reread, 4)


# -- 10 ---------------------------------------------------------------------

def test_ac10_judge_plumbing():
    with criterion(10, "judge: exact means over a 100-dialogue cohort; score 6 -> JudgeParseError after retry"):
        catalog = toy.make_catalog(60, seed=2)
        users = toy.make_users(catalog, 100, seed=2)
        adapter = PopularityAdapter(catalog, interaction_counts(users), k=4)
        res = run_cohort(users, SimulationConfig(max_turns=2), STUB, adapter, catalog, parallelism=4)
        assert res.failures == {}
        order = {u.user_id: n for n, u in enumerate(users)}

        def scripted_judge(messages):
            # which dialogue is being judged is recoverable from its general preferences
            text = messages[-1]["content"]
            n = next(order[t.user_id] for t in res.transcripts if t.general.narrative in text)
            return json.dumps({"proactiveness": {"rationale": "r", "score": 1 + n % 5},
                               "coherence": {"rationale": "r", "score": 5},
                               "personalization": {"rationale": "r", "score": 1 + 3 * (n % 2)}})

        narratives = [t.general.narrative for t in res.transcripts]
        assert len(set(narratives)) == len(narratives)
        judge = FunctionBackend(scripted_judge, model_name="judge-fixture")
        scores = [judge_transcript(t, t.general, judge) for t in res.transcripts]
        table = aggregate_judgments(scores)
        assert table["proactiveness"]["mean"] == 3.0 and table["proactiveness"]["n"] == 100
        assert table["coherence"]["mean"] == 5.0 and table["coherence"]["std"] == 0.0
        assert table["personalization"]["mean"] == 2.5
        assert math.isclose(table["proactiveness"]["std"], math.sqrt(2), rel_tol=1e-12)
        assert math.isclose(table["personalization"]["std"], 1.5, rel_tol=1e-12)

        stub_scores = [judge_transcript(t, t.general, STUB) for t in res.transcripts]
        stub_table = aggregate_judgments(stub_scores)
        for dim in ("proactiveness", "coherence", "personalization"):
            values = [getattr(s, dim) for s in stub_scores]
            assert stub_table[dim]["mean"] == float(Fraction(sum(values), len(values)))
            assert stub_table[dim]["std"] == statistics.pstdev(values)

        bad = ScriptedBackend([json.dumps({d: {"rationale": "r", "score": 6}
                                           for d in ("proactiveness", "coherence", "personalization")})] * 3)
        with pytest.raises(JudgeParseError):
            judge_transcript(res.transcripts[0], res.transcripts[0].general, bad)
        assert len(bad.calls) == 2
