"""Command-line entry point: ``crs-eval <command>``.

Exit codes: 0 ok, 2 config/usage, 3 upstream service, 4 data contract.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import subprocess
import sys
import time
import uuid
from dataclasses import replace
from pathlib import Path

import yaml

from . import __version__, corpus, jsonl, metrics, toy
from .agents import VARIANTS, build_adapter
from .backends import build_backend, set_request_limit
from .engine import COMPLETED, SimulationConfig, load_transcripts, make_split, run_cohort
from .errors import ConfigError, DataContractError, HarnessError
from .judge import DIMENSIONS, aggregate_judgments, judge_transcript
from .preference import PreferenceSettings, extract_seen_preferences, generate_general_preference
from . import render

log = logging.getLogger("crs_eval")

CONFIG_KEYS = {"corpus", "out_dir", "seed", "simulation", "backend", "adapter", "users",
               "sweep", "parallelism", "max_inflight"}
SWEEPABLE = {"k", "history_size", "max_turns", "n_targets", "mode"}
MANIFEST = "manifest.json"


class UsageError(ConfigError):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _guard_output(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- ingest --------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    items_path = _require(Path(args.items), "items file")
    users_path = _require(Path(args.users), "users file")
    out = Path(args.out_dir)
    _guard_output(out / "users.jsonl", args.force)
    catalog = corpus.ingest_catalog(items_path)
    users = corpus.load_users(users_path, (args.rating_min, args.rating_max))
    aligned, report = corpus.align_users_with_report(users, catalog, args.k_min)
    out.mkdir(parents=True, exist_ok=True)
    catalog.save(out / "items.jsonl")
    corpus.save_users(out / "users.jsonl", aligned)
    summary = {"items": len(catalog), "k_min": args.k_min, **report.__dict__,
               "items_digest": _sha256(out / "items.jsonl"), "users_digest": _sha256(out / "users.jsonl")}
    _write_json(out / "ingest_report.json", summary)
    print(f"items: {len(catalog)}")
    print(f"users kept: {report.users_kept}  dropped: {report.users_dropped}  (k_min={args.k_min})")
    print(f"interactions kept: {report.interactions_kept} of {report.interactions_in}"
          f"  (title-matched: {report.matched_by_title})")
    return 0


def cmd_toy_corpus(args) -> int:
    out = Path(args.out_dir)
    _guard_output(out / "users.jsonl", args.force)
    catalog = toy.make_catalog(args.items, args.seed)
    users = toy.make_users(catalog, args.users, seed=args.seed)
    catalog.save(out / "items.jsonl")
    corpus.save_users(out / "users.jsonl", users)
    print(f"wrote {len(catalog)} items and {len(users)} users to {out}")
    return 0


# -- simulate ------------------------------------------------------------------------

def load_config(path) -> dict:
    path = _require(Path(path), "config file")
    try:
        cfg = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}; allowed: {sorted(CONFIG_KEYS)}")
    if "corpus" not in cfg:
        raise ConfigError(f"{path}: missing required key 'corpus'")
    for section in ("backend", "adapter"):
        if "api_key" in (cfg.get(section) or {}):
            raise ConfigError(f"{path}: credentials belong in environment variables, not '{section}.api_key'")
    sweep = cfg.get("sweep") or {}
    bad = sorted(set(sweep) - SWEEPABLE)
    if bad:
        raise ConfigError(f"{path}: cannot sweep {bad}; sweepable: {sorted(SWEEPABLE)}")
    base = base_sim_config(cfg, path)
    for values in sweep_points(sweep):
        try:
            replace(base, **values)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    cfg["_dir"] = str(path.parent)
    return cfg


def base_sim_config(cfg: dict, path="config") -> SimulationConfig:
    sim = dict(cfg.get("simulation") or {})
    if "seed" in cfg:
        sim.setdefault("seed", cfg["seed"])
    try:
        return SimulationConfig.from_dict(sim)
    except TypeError as exc:
        raise ConfigError(f"{path}: simulation: {exc}") from None


def sweep_points(sweep: dict) -> list[dict]:
    if not sweep:
        return [{}]
    keys = sorted(sweep)
    lists = [sweep[k] if isinstance(sweep[k], list) else [sweep[k]] for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*lists)]


def point_name(values: dict) -> str:
    return "__".join(f"{k}={v}" for k, v in sorted(values.items()))


def load_corpus(corpus_dir: Path):
    catalog = corpus.ingest_catalog(_require(corpus_dir / "items.jsonl", "catalog"))
    users = corpus.load_users(_require(corpus_dir / "users.jsonl", "users file"))
    for user in users:
        missing = [i for i in user.item_ids if i not in catalog]
        if missing:
            raise DataContractError(f"user {user.user_id} references unknown items {missing[:5]}; "
                                    "run `crs-eval ingest` first")
    return catalog, users


def select_users(users, cfg: dict, sim_configs: list[SimulationConfig]):
    opts = cfg.get("users") or {}
    need = max(c.n_targets + (c.history_size or 1) for c in sim_configs)
    need = max(need, int(opts.get("min_interactions", 0)))
    eligible = [u for u in users if len(u.interactions) >= need]
    if opts.get("ids"):
        wanted = set(map(str, opts["ids"]))
        eligible = [u for u in eligible if u.user_id in wanted]
    if opts.get("limit") is not None:
        eligible = eligible[: int(opts["limit"])]
    return eligible


DERIVED_OUTPUTS = ("metrics.csv", "metrics_long.csv", "per_user_pc.csv", "metrics_summary.json", "bias.csv",
                   "judgments.jsonl", "judge_summary.csv", "splits.jsonl", MANIFEST)


def _clear_run(run_dir: Path) -> None:
    for p in (run_dir / "transcripts").glob("*.jsonl"):
        p.unlink()
    for name in DERIVED_OUTPUTS:
        (run_dir / name).unlink(missing_ok=True)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    base_dir = Path(cfg["_dir"])
    corpus_dir = Path(cfg["corpus"])
    if not corpus_dir.is_absolute():
        corpus_dir = base_dir / corpus_dir
    out_root = Path(args.out or cfg.get("out_dir") or "runs/latest")
    catalog, users = load_corpus(corpus_dir)
    base = base_sim_config(cfg, args.config)
    points = sweep_points(cfg.get("sweep") or {})
    sims = [replace(base, **p) for p in points]
    cohort = select_users(users, cfg, sims)
    if not cohort:
        raise DataContractError("no users satisfy the configured history requirements")
    if args.max_inflight or cfg.get("max_inflight"):
        set_request_limit(int(args.max_inflight or cfg["max_inflight"]))
    parallelism = int(args.parallelism or cfg.get("parallelism", 1))
    counts = corpus.interaction_counts(users)
    status = 0
    for values, sim in zip(points, sims):
        run_dir = out_root / point_name(values) if values else out_root
        manifest_path = run_dir / MANIFEST
        if manifest_path.exists() and not (args.force or args.resume):
            raise UsageError(f"{manifest_path} exists; pass --resume to continue or --force to overwrite")
        if args.force and not args.resume:
            _clear_run(run_dir)
        previous = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        manifest = {
            "run_id": previous.get("run_id") or uuid.uuid4().hex,
            "config": {k: v for k, v in cfg.items() if not k.startswith("_")},
            "simulation": sim.to_dict(),
            "sweep_point": values,
            "adapter": (cfg.get("adapter") or {}).get("name") or (cfg.get("adapter") or {}).get("kind", "popularity"),
            "corpus_digests": {"items": _sha256(corpus_dir / "items.jsonl"),
                               "users": _sha256(corpus_dir / "users.jsonl")},
            "version": _version(),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "stages": {**previous.get("stages", {}), "simulate": "running"},
            "resumed": bool(args.resume and previous),
            "n_users": len(cohort),
        }
        _write_json(manifest_path, manifest)
        backend = build_backend(cfg.get("backend"))
        adapter = build_adapter(cfg.get("adapter") or {"kind": "popularity"}, catalog, sim.k, counts,
                                seed=sim.seed)
        splits = {u.user_id: make_split(u, sim) for u in cohort}
        corpus.save_splits(run_dir / "splits.jsonl", splits.values())
        result = run_cohort(cohort, sim, backend, adapter, catalog, parallelism=parallelism,
                            splits=splits, out_dir=run_dir / "transcripts", resume=args.resume)
        manifest.update({
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "stages": {**manifest["stages"], "simulate": "completed" if not result.failures else "partial"},
            "failures": result.failures,
            "wall_clock_seconds": {u: round(s, 3) for u, s in sorted(result.timing.items())},
        })
        _write_json(manifest_path, manifest)
        done = len(result.completed)
        print(f"{run_dir}: {done}/{len(cohort)} dialogues completed"
              + (f", {len(result.failures)} failed" if result.failures else ""))
        for user_id, reason in sorted(result.failures.items()):
            print(f"  {user_id}: {reason}", file=sys.stderr)
        if result.failures:
            status = 4
    return status


# -- evaluate ------------------------------------------------------------------------

def _run_dirs(path: Path) -> list[Path]:
    if (path / MANIFEST).exists() or (path / "transcripts").is_dir():
        return [path]
    subs = sorted(p.parent for p in path.glob(f"*/{MANIFEST}"))
    if subs:
        return subs
    if list(path.glob("*.jsonl")):
        return [path]
    raise UsageError(f"{path}: no run directory or transcripts found")


def _transcripts_of(run_dir: Path):
    tdir = run_dir / "transcripts" if (run_dir / "transcripts").is_dir() else run_dir
    trs = load_transcripts(tdir)
    if not trs:
        raise UsageError(f"{tdir}: no transcripts")
    return trs


def _update_stage(run_dir: Path, stage: str, state: str) -> None:
    path = run_dir / MANIFEST
    if path.exists():
        m = json.loads(path.read_text())
        m.setdefault("stages", {})[stage] = state
        _write_json(path, m)


def cmd_evaluate(args) -> int:
    for run_dir in _run_dirs(Path(args.run_dir)):
        out = run_dir / "metrics.csv"
        _guard_output(out, args.force)
        trs = _transcripts_of(run_dir)
        k = args.k if args.k is not None else trs[0].config.get("k")
        report = metrics.metrics_report(trs, k=k, normalize=args.recall_normalize)
        metrics.write_metrics_csv(report, out)
        system = _system_name(run_dir)
        metrics.write_long_csv(report, run_dir / "metrics_long.csv", system)
        with open(run_dir / "per_user_pc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "t", "pc"])
            for user_id, series in sorted(report.per_user.items()):
                for t, v in enumerate(series, start=1):
                    w.writerow([user_id, t, repr(v)])
        summary = {"cohort_size": report.cohort_size, "k": k, "recall_normalize": args.recall_normalize,
                   "aborted": sorted(t.user_id for t in trs if t.status != COMPLETED)}
        if trs[0].config.get("mode") == "target_biased":
            bias = metrics.bias_from_transcripts(trs)
            metrics.write_bias_csv(bias, run_dir / "bias.csv")
            summary["bias_gap_final"] = bias.gap
        _write_json(run_dir / "metrics_summary.json", summary)
        _update_stage(run_dir, "evaluate", "completed")
        last = report.per_turn[-1]
        print(f"{run_dir}: users={report.cohort_size} T={last['t']} PC={last['pc_t']:.4f} "
              f"Recall@{k}={last['recall_at_t_K']:.4f}")
    return 0


# -- judge ---------------------------------------------------------------------------

def cmd_judge(args) -> int:
    spec = {"kind": args.backend, "model": args.model} if args.model else {"kind": args.backend}
    if args.endpoint_env:
        spec["endpoint_env"] = args.endpoint_env
    backend = build_backend(spec)
    for run_dir in _run_dirs(Path(args.run_dir)):
        out = run_dir / "judgments.jsonl"
        _guard_output(out, args.force)
        judgments, rows, failures = [], [], {}
        for tr in _transcripts_of(run_dir):
            if not tr.turns or tr.general is None:
                failures[tr.user_id] = "no complete turn"
                continue
            calls: list = []
            try:
                scores = judge_transcript(tr, tr.general, backend, prompt_dir=args.prompt_dir, log_to=calls)
            except HarnessError as exc:
                failures[tr.user_id] = str(exc)
                rows.append({"user_id": tr.user_id, "error": str(exc), "prompts": calls})
                continue
            judgments.append(scores)
            rows.append({**scores.to_dict(), "prompts": calls})
        jsonl.write(out, rows)
        if not judgments:
            raise DataContractError(f"{run_dir}: no transcript could be judged")
        table = aggregate_judgments(judgments)
        with open(run_dir / "judge_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dimension", "mean", "std", "n"])
            for dim in DIMENSIONS:
                w.writerow([dim, repr(table[dim]["mean"]), repr(table[dim]["std"]), table[dim]["n"]])
        _update_stage(run_dir, "judge", "completed" if not failures else "partial")
        print(f"{run_dir}: " + "  ".join(f"{d}={table[d]['mean']:.3f}±{table[d]['std']:.3f}" for d in DIMENSIONS)
              + f"  (n={len(judgments)}, failed={len(failures)})")
    return 0


# -- pairwise ------------------------------------------------------------------------

def build_pairwise_subjects(users, catalog, backend, n_targets: int, seed: int,
                            settings: PreferenceSettings | None = None):
    settings = settings or PreferenceSettings()
    subjects = []
    for user in users:
        split = corpus.split_user(user, n_targets, seed)
        prefs = extract_seen_preferences(user, split, catalog, backend, settings=settings)
        general = generate_general_preference(
            list(prefs.values()), [catalog[i] for i in split.seen], backend, user_id=user.user_id,
            forbidden_titles=catalog.titles(split.targets), targets=split.targets, settings=settings)
        reviews = "\n".join(f"{catalog[i].title}: {user.interaction(i).review.strip()}"
                            for i in split.seen if user.interaction(i).review.strip())
        binary = "\n".join(render.pref_line(p, catalog[p.item_id]) for p in prefs.values())
        subjects.append(metrics.PairwiseSubject(
            user.user_id,
            {"raw_reviews": reviews or "(no reviews)", "binary_prefs": binary, "general_prefs": general.narrative},
            [(catalog[t], user.interaction(t).rating) for t in split.targets]))
    return subjects


def cmd_pairwise(args) -> int:
    out = Path(args.out) if args.out else Path(args.corpus_dir) / "pairwise.csv"
    _guard_output(out, args.force)
    catalog, users = load_corpus(Path(args.corpus_dir))
    users = [u for u in users if len(u.interactions) > args.n_targets][: args.users or None]
    spec = {"kind": args.backend, "model": args.model} if args.model else {"kind": args.backend}
    backend = build_backend(spec)
    subjects = build_pairwise_subjects(users, catalog, backend, args.n_targets, args.seed)
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    reports = [metrics.pairwise_accuracy(subjects, v, backend, seed=args.seed) for v in variants]
    metrics.write_pairwise_csv(reports, out)
    for r in reports:
        print(f"{r.variant:14s} pairs={r.n_pairs:6d} correct={r.n_correct:6d} "
              f"accuracy={r.accuracy:.4f} ties_excluded={r.n_ties_excluded}")
    return 0


# -- report --------------------------------------------------------------------------

def _system_name(run_dir: Path) -> str:
    path = run_dir / MANIFEST
    if path.exists():
        m = json.loads(path.read_text())
        point = m.get("sweep_point") or {}
        return m.get("adapter", run_dir.name) + (f" [{point_name(point)}]" if point else "")
    return run_dir.name


def cmd_report(args) -> int:
    turns = [int(t) for t in args.turns.split(",")] if args.turns else None
    rows, long_rows = [], []
    for arg in args.run_dirs:
        for run_dir in _run_dirs(Path(arg)):
            mpath = run_dir / "metrics.csv"
            if not mpath.exists():
                raise UsageError(f"{run_dir}: metrics.csv missing; run `crs-eval evaluate {run_dir}` first")
            per_turn = metrics.read_metrics_csv(mpath)
            by_t = {int(r["t"]): r for r in per_turn}
            last = max(by_t)
            show = turns or sorted({t for t in (5, 10, 15, 20) if t <= last} | {last})
            row = {"system": _system_name(run_dir)}
            for t in show:
                row[f"pc@{t}"] = float(by_t[t]["pc"]) if t in by_t else ""
            for t in show:
                row[f"recall@{t}"] = float(by_t[t]["recall_at_K"]) if t in by_t else ""
            row["pcir_mean"] = sum(float(r["pcir"]) for r in per_turn) / len(per_turn)
            jpath = run_dir / "judge_summary.csv"
            if jpath.exists():
                with open(jpath, newline="") as fh:
                    for r in csv.DictReader(fh):
                        row[r["dimension"]] = float(r["mean"])
            rows.append(row)
            for r in per_turn:
                for name in ("pc", "pcir", "recall_at_K"):
                    long_rows.append([row["system"], r["t"], name, r[name]])
    columns = list(dict.fromkeys(c for r in rows for c in r))
    out = Path(args.out)
    _guard_output(out, args.force)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, restval="")
        w.writeheader()
        w.writerows(rows)
    long_out = out.with_name(out.stem + "_long.csv")
    with open(long_out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "t", "metric", "value"])
        w.writerows(long_rows)
    widths = {c: max(len(c), *(len(_fmt(r.get(c, ""))) for r in rows)) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for r in rows:
        print("  ".join(_fmt(r.get(c, "")).ljust(widths[c]) for c in columns))
    return 0


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crs-eval", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="align a users file to a catalog and filter short histories")
    s.add_argument("items")
    s.add_argument("users")
    s.add_argument("out_dir")
    s.add_argument("--k-min", type=int, default=corpus.DEFAULT_K_MIN)
    s.add_argument("--rating-min", type=int, default=corpus.DEFAULT_RATING_SCALE[0])
    s.add_argument("--rating-max", type=int, default=corpus.DEFAULT_RATING_SCALE[1])
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("toy-corpus", help="write a synthetic raw corpus for offline runs")
    s.add_argument("out_dir")
    s.add_argument("--users", type=int, default=10)
    s.add_argument("--items", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_toy_corpus)

    s = sub.add_parser("simulate", help="run simulated dialogues from a config file")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--parallelism", type=int)
    s.add_argument("--max-inflight", type=int, help="global cap on in-flight remote requests")
    s.add_argument("--resume", action="store_true", help="continue partial transcripts")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("evaluate", help="compute PC / PCIR / Recall tables from transcripts")
    s.add_argument("run_dir")
    s.add_argument("--k", type=int)
    s.add_argument("--recall-normalize", choices=[metrics.NORMALIZE_TARGETS, metrics.NORMALIZE_MIN_K],
                   default=metrics.NORMALIZE_TARGETS)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("judge", help="score transcripts with the rubric judge")
    s.add_argument("run_dir")
    s.add_argument("--backend", default="stub", choices=["stub", "remote_chat"])
    s.add_argument("--model")
    s.add_argument("--endpoint-env", help="env var holding the judge endpoint")
    s.add_argument("--prompt-dir")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_judge)

    s = sub.add_parser("pairwise", help="rating-identification probe over target pairs")
    s.add_argument("corpus_dir")
    s.add_argument("--variant", default="all", choices=["all", *VARIANTS])
    s.add_argument("--n-targets", type=int, default=corpus.DEFAULT_N_TARGETS)
    s.add_argument("--users", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--backend", default="stub", choices=["stub", "remote_chat"])
    s.add_argument("--model")
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_pairwise)

    s = sub.add_parser("report", help="combine evaluated runs into one comparison table")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--turns", help="comma-separated turns to show, e.g. 5,10,15,20")
    s.add_argument("--out", default="report.csv")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
