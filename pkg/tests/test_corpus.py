import json

import pytest

from crs_eval import corpus
from crs_eval.corpus import (Catalog, InteractionRecord, UserRecord, align_users, align_users_with_report,
                             ingest_catalog, load_splits, load_users, restrict_history, save_splits, split_user)
from crs_eval.errors import CorpusError, SplitError

from conftest import make_item, make_user


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def item_row(i, title=None):
    return {"item_id": i, "title": title or f"Title {i}", "genres": ["Drama"], "directors": [],
            "stars": [], "plot": ""}


def test_ingest_three_items(tmp_path):
    cat = ingest_catalog(write_lines(tmp_path / "items.jsonl", [item_row("m1"), item_row("m2"), item_row("m3")]))
    assert len(cat) == 3
    assert cat.ids() == ["m1", "m2", "m3"]


def test_ingest_duplicate_id_names_it(tmp_path):
    with pytest.raises(CorpusError, match="m1"):
        ingest_catalog(write_lines(tmp_path / "items.jsonl", [item_row("m1"), item_row("m1")]))


def test_ingest_missing_title_reports_line(tmp_path):
    bad = item_row("m2")
    del bad["title"]
    with pytest.raises(CorpusError, match=r"items\.jsonl:2:"):
        ingest_catalog(write_lines(tmp_path / "items.jsonl", [item_row("m1"), bad]))


def test_ingest_malformed_json_reports_line(tmp_path):
    path = tmp_path / "items.jsonl"
    path.write_text(json.dumps(item_row("m1")) + "\n{not json\n")
    with pytest.raises(CorpusError, match=r"items\.jsonl:2:"):
        ingest_catalog(path)


def test_load_users_rejects_out_of_scale_rating(tmp_path):
    path = write_lines(tmp_path / "users.jsonl", [
        {"user_id": "u1", "interactions": [{"item_id": "m1", "rating": 11, "review": "", "timestamp": 1}]}])
    with pytest.raises(CorpusError):
        load_users(path)
    assert load_users(path, rating_scale=(1, 20))[0].interactions[0].rating == 11


def test_align_keeps_user_with_eleven_in_catalog():
    cat = Catalog([make_item(f"m{i}") for i in range(11)])
    user = make_user("u1", [f"m{i}" for i in range(12)])
    kept = align_users([user], cat, k_min=10)
    assert len(kept) == 1 and len(kept[0].interactions) == 11


def test_align_drops_user_with_nine_in_catalog():
    cat = Catalog([make_item(f"m{i}") for i in range(9)])
    user = make_user("u1", [f"m{i}" for i in range(12)])
    kept, report = align_users_with_report([user], cat, k_min=10)
    assert kept == [] and report.users_dropped == 1 and report.dropped_user_ids == ["u1"]


def test_align_empty_catalog_drops_everyone():
    users = [make_user(f"u{i}", [f"m{j}" for j in range(12)]) for i in range(3)]
    assert align_users(users, Catalog(), k_min=1) == []


def test_align_is_idempotent(toy_catalog, toy_users):
    once = align_users(toy_users, toy_catalog, 15)
    assert align_users(once, toy_catalog, 15) == once


def test_align_rejects_bad_k_min(small_catalog):
    with pytest.raises(ValueError):
        align_users([], small_catalog, 0)


def test_title_fallback_requires_year_match():
    cat = Catalog([make_item("a", "Heat", year=1995), make_item("b", "Heat", year=1986), make_item("c", "Alien")])
    recs = (InteractionRecord("x1", 8, "", 1, title="Heat", year=1995),
            InteractionRecord("x2", 8, "", 2, title="Heat", year=2001),
            InteractionRecord("x3", 8, "", 3, title="alien!", year=None),
            InteractionRecord("x4", 8, "", 4, title="Heat", year=None))
    kept, report = align_users_with_report([UserRecord("u", recs)], cat, k_min=1)
    assert [r.item_id for r in kept[0].interactions] == ["a", "c"]
    assert report.matched_by_title == 2


def test_duplicate_interactions_keep_latest():
    recs = [InteractionRecord("m1", 3, "old", 10), InteractionRecord("m1", 9, "new", 20),
            InteractionRecord("m2", 5, "first", None), InteractionRecord("m2", 6, "second", None)]
    out = {r.item_id: r for r in corpus.dedupe_interactions(recs)}
    assert out["m1"].review == "new" and out["m2"].review == "second"


def test_split_sizes_and_disjointness():
    user = make_user("u1", [f"m{i}" for i in range(25)])
    s = split_user(user, 5, seed=3)
    assert len(s.seen) == 20 and len(s.targets) == 5
    assert not set(s.seen) & set(s.targets)
    assert set(s.seen) | set(s.targets) == set(user.item_ids)


def test_split_is_deterministic():
    user = make_user("u1", [f"m{i}" for i in range(25)])
    assert split_user(user, 5, 7) == split_user(user, 5, 7)


def test_split_rejects_too_many_targets():
    user = make_user("u1", [f"m{i}" for i in range(5)])
    with pytest.raises(SplitError):
        split_user(user, 5, 0)


def test_split_varies_with_seed():
    user = make_user("u1", [f"m{i}" for i in range(8)])
    distinct = {tuple(sorted(split_user(user, 5, s).targets)) for s in range(100)}
    assert len(distinct) >= 2


def test_chronological_split_holds_out_latest():
    user = make_user("u1", [f"m{i}" for i in range(10)])
    s = split_user(user, 3, 0, strategy="chronological")
    assert set(s.targets) == {"m7", "m8", "m9"}


def test_restrict_history_nests():
    user = make_user("u1", [f"m{i}" for i in range(25)])
    s = split_user(user, 5, 0)
    sizes = [restrict_history(s, n, 0).seen for n in (5, 10, 15, 20)]
    for small, big in zip(sizes, sizes[1:]):
        assert set(small) <= set(big)
    assert all(r_t == s.targets for r_t in [restrict_history(s, 5, 0).targets])


def test_splits_roundtrip(tmp_path):
    user = make_user("u1", [f"m{i}" for i in range(12)])
    s = split_user(user, 5, 2)
    save_splits(tmp_path / "s.jsonl", [s])
    row = json.loads((tmp_path / "s.jsonl").read_text())
    assert set(row) == {"user_id", "seed", "seen", "targets"}
    assert load_splits(tmp_path / "s.jsonl") == [s]
