"""Turn-indexed coverage metrics, selected/residual bias split, and the pairwise probe.

Per-user fractions are accumulated as :class:`fractions.Fraction` so cohort
averages do not depend on aggregation order; floats appear only in reports.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

from .agents import pairwise_select
from .corpus import ItemRecord
from .errors import MetricsError

Slates = Sequence[Sequence[str]]

NORMALIZE_TARGETS = "targets"
NORMALIZE_MIN_K = "min_k"


def slates_by_user(transcripts) -> dict[str, list[tuple[str, ...]]]:
    """Accept a mapping ``user -> slates`` or an iterable of transcripts."""
    if isinstance(transcripts, Mapping):
        return {u: [tuple(s) for s in slates] for u, slates in transcripts.items()}
    return {t.user_id: [tuple(s) for s in t.slates] for t in transcripts}


def targets_from(transcripts) -> dict[str, tuple[str, ...]]:
    return {t.user_id: tuple(t.split.targets) for t in transcripts}


def _resolve(transcripts, targets_by_user):
    slates = slates_by_user(transcripts)
    if targets_by_user is None:
        if isinstance(transcripts, Mapping):
            raise MetricsError("targets_by_user is required for raw slate mappings")
        targets_by_user = targets_from(transcripts)
    missing = [u for u in slates if u not in targets_by_user]
    if missing:
        raise MetricsError(f"no targets for users {missing}")
    return slates, targets_by_user


def user_coverage(slates: Slates, targets: Iterable[str], t: int) -> Fraction:
    """|(P_1 ∪ ... ∪ P_t) ∩ Y| / |Y| for one user."""
    y = set(targets)
    if not y:
        raise MetricsError("empty target set")
    covered: set[str] = set()
    for slate in slates[:t]:
        covered.update(slate)
    return Fraction(len(covered & y), len(y))


@dataclass(frozen=True)
class Averaged:
    value: Fraction
    n_users: int
    excluded: tuple[str, ...] = ()

    def __float__(self) -> float:
        return float(self.value)


def pc_detail(transcripts, targets_by_user=None, t: int = 1) -> Averaged:
    """Preference coverage at turn t with its user count.

    Users whose dialogue ended before turn t are left out of the average and
    listed in ``excluded``.
    """
    if t < 0:
        raise MetricsError("t must be >= 0")
    slates, targets = _resolve(transcripts, targets_by_user)
    empty = [u for u in slates if not targets[u]]
    if empty:
        raise MetricsError(f"users with empty target sets: {empty}")
    if t == 0:
        return Averaged(Fraction(0), len(slates))
    included = [u for u in slates if len(slates[u]) >= t]
    excluded = tuple(u for u in slates if len(slates[u]) < t)
    if not included:
        raise MetricsError(f"no user reached turn {t}")
    total = sum((user_coverage(slates[u], targets[u], t) for u in included), Fraction(0))
    return Averaged(total / len(included), len(included), excluded)


def pc(transcripts, targets_by_user=None, t: int = 1) -> float:
    return float(pc_detail(transcripts, targets_by_user, t).value)


def pc_series(transcripts, targets_by_user=None, max_t: int | None = None) -> list[Fraction]:
    """[PC_1, ..., PC_max_t] as exact fractions."""
    slates, targets = _resolve(transcripts, targets_by_user)
    if max_t is None:
        max_t = max((len(s) for s in slates.values()), default=0)
    return [pc_detail(slates, targets, t).value for t in range(1, max_t + 1)]


def pcir(pc_values: Sequence) -> list:
    """First differences of a PC series starting at t=1, with PC_0 = 0."""
    out = []
    prev = 0
    for value in pc_values:
        out.append(value - prev)
        prev = value
    return out


def user_recall(slate: Sequence[str], targets: Iterable[str], k: int,
                normalize: str = NORMALIZE_TARGETS) -> Fraction:
    y = set(targets)
    if not y:
        raise MetricsError("empty target set")
    hits = len(set(slate[:k]) & y)
    if normalize == NORMALIZE_TARGETS:
        return Fraction(hits, len(y))
    if normalize == NORMALIZE_MIN_K:
        return Fraction(hits, min(k, len(y)))
    raise MetricsError(f"unknown recall normalization {normalize!r}")


def recall_detail(transcripts, targets_by_user=None, t: int = 1, k: int | None = None,
                  normalize: str = NORMALIZE_TARGETS, partial: str = "error") -> Averaged:
    """Turn-local Recall@K of P_t; no accumulation across turns."""
    if t < 1:
        raise MetricsError("t must be >= 1")
    slates, targets = _resolve(transcripts, targets_by_user)
    short = [u for u in slates if len(slates[u]) < t]
    if short and partial == "error":
        raise MetricsError(f"turn {t} exceeds the transcripts of users {short}")
    included = [u for u in slates if len(slates[u]) >= t]
    if not included:
        raise MetricsError(f"no user reached turn {t}")
    total = Fraction(0)
    for u in included:
        slate = slates[u][t - 1]
        kk = len(slate) if k is None else k
        if kk > len(slate):
            raise MetricsError(f"user {u}: turn {t} slate has {len(slate)} items, K={kk}")
        total += user_recall(slate, targets[u], kk, normalize)
    return Averaged(total / len(included), len(included), tuple(short))


def recall_at(transcripts, targets_by_user=None, t: int = 1, k: int | None = None,
              normalize: str = NORMALIZE_TARGETS) -> float:
    return float(recall_detail(transcripts, targets_by_user, t, k, normalize).value)


@dataclass
class MetricsReport:
    per_turn: list[dict]
    per_user: dict[str, list[float]]
    cohort_size: int
    k: int | None
    config: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return self.per_turn


def metrics_report(transcripts, targets_by_user=None, k: int | None = None, max_t: int | None = None,
                   normalize: str = NORMALIZE_TARGETS, config: dict | None = None) -> MetricsReport:
    slates, targets = _resolve(transcripts, targets_by_user)
    if not slates:
        raise MetricsError("no transcripts")
    if max_t is None:
        max_t = max(len(s) for s in slates.values())
    pcs, rows = [], []
    for t in range(1, max_t + 1):
        cov = pc_detail(slates, targets, t)
        rec = recall_detail(slates, targets, t, k, normalize, partial="exclude")
        pcs.append(cov.value)
        rows.append({"t": t, "recall_at_t_K": float(rec.value), "pc_t": float(cov.value),
                     "n_users": cov.n_users, "n_excluded": len(cov.excluded)})
    for row, inc in zip(rows, pcir(pcs)):
        row["pcir_t"] = float(inc)
    per_user = {u: [float(user_coverage(s, targets[u], t)) for t in range(1, len(s) + 1)]
                for u, s in slates.items()}
    return MetricsReport(rows, per_user, len(slates), k, dict(config or {}))


@dataclass
class BiasReport:
    pc_selected: list[Fraction]
    pc_residual: list[Fraction]

    @property
    def gap(self) -> float:
        if not self.pc_selected:
            return 0.0
        return float(self.pc_selected[-1] - self.pc_residual[-1])


def bias_decomposition(transcripts, selected_by_user: Mapping[str, Iterable[str]],
                       residual_by_user: Mapping[str, Iterable[str]],
                       targets_by_user: Mapping[str, Iterable[str]] | None = None,
                       max_t: int | None = None) -> BiasReport:
    """PC computed separately against the selected and residual halves of the targets."""
    slates = slates_by_user(transcripts)
    for u in slates:
        sel, res = set(selected_by_user[u]), set(residual_by_user[u])
        if sel & res:
            raise MetricsError(f"user {u}: selected and residual overlap on {sorted(sel & res)}")
        if targets_by_user is not None and sel | res != set(targets_by_user[u]):
            raise MetricsError(f"user {u}: selected and residual do not partition the targets")
    sel_targets = {u: tuple(selected_by_user[u]) for u in slates}
    res_targets = {u: tuple(residual_by_user[u]) for u in slates}
    return BiasReport(pc_series(slates, sel_targets, max_t), pc_series(slates, res_targets, max_t))


def bias_from_transcripts(transcripts, max_t: int | None = None) -> BiasReport:
    return bias_decomposition(transcripts, {t.user_id: t.selected for t in transcripts},
                              {t.user_id: t.residual for t in transcripts},
                              targets_from(transcripts), max_t)


def sign_test(differences: Iterable[float]) -> tuple[int, int, float]:
    """Exact two-sided sign test. Returns (n_positive, n_negative, p_value); zeros dropped."""
    diffs = list(differences)
    pos = sum(d > 0 for d in diffs)
    neg = sum(d < 0 for d in diffs)
    n = pos + neg
    if n == 0:
        return 0, 0, 1.0
    tail = sum(math.comb(n, i) for i in range(min(pos, neg) + 1))
    return pos, neg, min(1.0, 2 * tail / 2 ** n)


# -- pairwise rating identification ---------------------------------------------------

@dataclass
class PairwiseSubject:
    user_id: str
    profiles: dict[str, str]
    rated: list[tuple[ItemRecord, int]]


@dataclass
class PairwiseReport:
    variant: str
    n_pairs: int
    n_correct: int
    n_ties_excluded: int
    n_errors: int = 0

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_pairs if self.n_pairs else float("nan")

    def to_row(self) -> dict:
        return {"variant": self.variant, "n_pairs": self.n_pairs, "n_correct": self.n_correct,
                "accuracy": self.accuracy, "n_ties_excluded": self.n_ties_excluded}


def eligible_pairs(rated: Sequence[tuple[ItemRecord, int]]):
    """All unordered pairs with different ratings, plus the number of tied pairs skipped."""
    pairs, ties = [], 0
    for i in range(len(rated)):
        for j in range(i + 1, len(rated)):
            if rated[i][1] == rated[j][1]:
                ties += 1
            else:
                pairs.append((rated[i], rated[j]))
    return pairs, ties


Selector = Callable[[str, tuple[ItemRecord, ItemRecord]], int]


def pairwise_accuracy(subjects: Iterable[PairwiseSubject], variant: str, backend=None, *,
                      selector: Selector | None = None, seed: int = 0,
                      max_pairs_per_user: int | None = None) -> PairwiseReport:
    """Share of non-tied target pairs where the simulator picks the higher-rated item.

    Presentation order of each pair is shuffled under ``seed`` so a position-
    biased selector cannot score above chance.
    """
    if selector is None:
        if backend is None:
            raise ValueError("need a backend or a selector")
        def selector(profile, pair):
            return pairwise_select(profile, pair, backend)

    n_pairs = n_correct = n_ties = 0
    for subj in subjects:
        pairs, ties = eligible_pairs(subj.rated)
        n_ties += ties
        rng = random.Random(f"pairwise/{seed}/{subj.user_id}")
        if max_pairs_per_user is not None and len(pairs) > max_pairs_per_user:
            pairs = rng.sample(pairs, max_pairs_per_user)
        profile = subj.profiles[variant]
        for (a, ra), (b, rb) in pairs:
            if rng.random() < 0.5:
                (a, ra), (b, rb) = (b, rb), (a, ra)
            choice = selector(profile, (a, b))
            if choice not in (0, 1):
                raise ValueError(f"selector returned {choice!r}")
            picked = ra if choice == 0 else rb
            n_pairs += 1
            n_correct += picked == max(ra, rb)
    if n_pairs == 0:
        raise MetricsError("no eligible (non-tied) pairs")
    return PairwiseReport(variant, n_pairs, n_correct, n_ties)


# -- CSV output ---------------------------------------------------------------------

METRIC_COLUMNS = ["t", "K", "recall_at_K", "pc", "pcir", "n_users", "n_excluded"]


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in report.per_turn:
            w.writerow([r["t"], report.k if report.k is not None else "", repr(r["recall_at_t_K"]),
                        repr(r["pc_t"]), repr(r["pcir_t"]), r["n_users"], r["n_excluded"]])


def write_long_csv(report: MetricsReport, path, system: str = "") -> None:
    """Plot-ready rows: system, t, metric, value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "t", "metric", "value"])
        for r in report.per_turn:
            for name, key in (("pc", "pc_t"), ("pcir", "pcir_t"), ("recall_at_K", "recall_at_t_K")):
                w.writerow([system, r["t"], name, repr(r[key])])


def write_bias_csv(report: BiasReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subset", "t", "pc", "pcir"])
        for subset, series in (("selected", report.pc_selected), ("residual", report.pc_residual)):
            for t, (v, d) in enumerate(zip(series, pcir(series)), start=1):
                w.writerow([subset, t, repr(float(v)), repr(float(d))])


def write_pairwise_csv(reports: Iterable[PairwiseReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "n_pairs", "n_correct", "accuracy", "n_ties_excluded"])
        w.writeheader()
        for r in reports:
            w.writerow(r.to_row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
