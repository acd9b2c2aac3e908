import pytest

from crs_eval import toy
from crs_eval.corpus import Catalog, InteractionRecord, ItemRecord, UserRecord


def make_item(item_id, title=None, genres=("Drama",), plot="", year=None):
    return ItemRecord(item_id, title or f"Film {item_id.upper()}", tuple(genres), ("Some Director",),
                      ("Some Star",), plot, year)


def make_user(user_id, item_ids, rating=7, review="felt gripping pacing"):
    return UserRecord(user_id, tuple(InteractionRecord(i, rating, review, n) for n, i in enumerate(item_ids)))


@pytest.fixture(scope="session")
def toy_catalog():
    return toy.make_catalog(60, seed=0)


@pytest.fixture(scope="session")
def toy_users(toy_catalog):
    return toy.make_users(toy_catalog, 10, seed=0)


@pytest.fixture
def small_catalog():
    return Catalog([make_item(f"m{i}") for i in range(1, 13)])


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
