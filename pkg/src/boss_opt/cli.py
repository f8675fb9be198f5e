"""Command-line entry point: ``boss-opt {run,verify,bench,tune,export-dataset}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, parse_config_text
from .core import ContractError

log = logging.getLogger("boss_opt")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- config and output handling --------------------------------------------


def _read_config(path) -> RunConfig:
    """Load a ``key = value`` file or a JSON manifest written by this tool."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            man = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if "config" not in man:
            raise ConfigError(f"{path}: manifest has no 'config' section")
        return RunConfig(man["config"])
    return RunConfig(parse_config_text(text))


def _int_list(s):
    try:
        return tuple(int(v) for v in s.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {s!r}") from None


def _resolve_config(args) -> RunConfig:
    cfg = _read_config(args.config)
    over = {}
    if getattr(args, "task", None):
        over["task.id"] = args.task
    if getattr(args, "mode", None):
        over["boss.mode"] = args.mode
    if getattr(args, "seeds", None):
        over["run.seeds"] = _int_list(args.seeds)
    if getattr(args, "seed", None) is not None:
        over["run.seeds"] = (args.seed,)
    cfg = cfg.with_overrides(**over) if over else cfg
    from .tasks import get_task

    get_task(cfg["task.id"])  # unknown task is a usage error
    return cfg


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: RunConfig, outputs, extra=None):
    man = {
        "tool": "boss-opt",
        "version": __version__,
        "command": command,
        "config": cfg.to_flat(),
        "seeds": list(cfg.seeds),
        "outputs": sorted(str(p) for p in outputs),
    }
    if extra:
        man.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _workers(n_jobs: int) -> int:
    raw = os.environ.get("BOSS_OPT_THREADS")
    if raw is None or raw == "":
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise UsageError(f"BOSS_OPT_THREADS must be a positive integer, got {raw!r}") from None
        if cap < 1:
            raise UsageError(f"BOSS_OPT_THREADS must be a positive integer, got {raw!r}")
    return max(1, min(cap, n_jobs))


def _run_one(flat_cfg, seed):
    """Worker body; returns plain data so results pickle cheaply."""
    from .pipeline import run_seed

    try:
        r = run_seed(RunConfig(flat_cfg), seed)
    except Exception as exc:  # recorded per seed, reported after the join
        return seed, None, f"{type(exc).__name__}: {exc}"
    return seed, r, None


def _fan_out(cfg: RunConfig, seeds):
    n = _workers(len(seeds))
    flat = cfg.to_flat()
    if n == 1:
        res = [_run_one(flat, s) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=n) as ex:
            res = list(ex.map(_run_one, [flat] * len(seeds), seeds))
    return sorted(res, key=lambda t: seeds.index(t[0]))


# --- subcommands -------------------------------------------------------------


def cmd_run(args) -> int:
    from .evaluation import aggregate, write_aggregate, write_results

    cfg = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    seeds = list(cfg.seeds)
    results = _fan_out(cfg, seeds)

    (out / "traces").mkdir()
    (out / "candidates").mkdir()
    written = []
    rows, reports, rmses, failures = [], [], [], []
    for seed, r, err in results:
        if err is not None:
            log.error("seed %d failed: %s", seed, err)
            failures.append({"seed": seed, "error": err})
            continue
        rows.append({
            "task": r.report.task, "method": r.report.method, "regularizer": cfg["boss.mode"], "seed": seed,
            "p50": r.report.p50, "p75": r.report.p75, "p100": r.report.p100, "rmse_ood": r.rmse_ood,
        })
        reports.append(r.report)
        rmses.append(r.rmse_ood)
        for j, tr in enumerate(r.traces):
            p = out / "traces" / f"seed{seed}_member{j}.csv"
            tr.to_csv(p)
            written.append(p.relative_to(out))
        p = out / "candidates" / f"seed{seed}.csv"
        r.candidates.to_csv(p)
        written.append(p.relative_to(out))
    write_results(out / "results.csv", rows)
    written.append(Path("results.csv"))
    if reports:
        write_aggregate(out / "aggregate.csv", [aggregate(reports, cfg["boss.mode"], rmses)])
        written.append(Path("aggregate.csv"))
    digests = {str(seed): r.dataset_digest for seed, r, err in results if err is None}
    _write_manifest(out, "run", cfg, written, {"dataset_sha256": digests, "failures": failures})
    for row in rows:
        print(f"{row['task']} {row['regularizer']} seed {row['seed']}: "
              f"p50 {row['p50']:.4f} p75 {row['p75']:.4f} p100 {row['p100']:.4f} rmse_ood {row['rmse_ood']:.4f}")
    if failures:
        print(f"{len(failures)} of {len(seeds)} seeds failed; see manifest.json", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks

    checks = run_checks(quick=args.quick)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_bench(args) -> int:
    import csv

    from .evaluation import linear_fit, runtime_scaling
    from .pipeline import build_data, pretrained

    m_values = _int_list(args.m)
    if not m_values:
        raise UsageError("--m needs at least one value")
    if any(m < 1 for m in m_values) or list(m_values) != sorted(m_values):
        raise UsageError("--m values must be positive and ascending")
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    seed = cfg.seeds[0]
    _, train, _ = build_data(cfg, seed)
    phi0 = pretrained(cfg, train, seed)
    rows = runtime_scaling(train, phi0.spec, cfg.boss.replace(seed=seed), m_values, phi0, args.repeats)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "seconds"])
        for m, t in rows:
            w.writerow([m, repr(t)])
            print(f"m={m:<5d} {t:.3f}s")
    if len(rows) >= 2:
        slope, _, r2 = linear_fit([m for m, _ in rows], [t for _, t in rows])
        print(f"slope {slope:.3e} s per sample, R^2 {r2:.3f}")
    _write_manifest(out, "bench", cfg, [Path("bench.csv")], {"m_values": list(m_values), "repeats": args.repeats})
    return EXIT_OK


def cmd_tune(args) -> int:
    import csv

    from .evaluation import rank_configs
    from .pipeline import build_data, pseudo_oracle

    cfg = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    key, values = cfg["tune.key"], cfg["tune.values"]
    seeds = list(cfg.seeds)
    task, train, _ = build_data(cfg, seeds[0])
    base = pseudo_oracle(cfg.with_overrides(**{"boss.mode": "none"}), train, seeds[0])
    configs = [cfg.with_overrides(**{key: v}).boss for v in values]
    r = rank_configs(base, configs, task, train, seeds, cfg, with_true=True)
    with open(out / "tune.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value", "pseudo_p100", "true_p100"])
        for v, ps, ts in zip(values, r.pseudo.mean(axis=1), r.true.mean(axis=1)):
            w.writerow([key, repr(float(v)), repr(float(ps)), repr(float(ts))])
            print(f"{key}={v:<10g} pseudo {ps:.6f} true {ts:.6f}")
    chosen, best_true = values[r.pseudo_best], values[r.true_best]
    print(f"selected {key}={chosen:g} (true-oracle best {best_true:g})")
    _write_manifest(out, "tune", cfg, [Path("tune.csv")], {"selected": chosen, "true_best": best_true})
    return EXIT_OK


def cmd_export_dataset(args) -> int:
    from .pipeline import build_data

    cfg = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    seed = cfg.seeds[0]
    task, train, holdout = build_data(cfg, seed)
    train.to_csv(out / "dataset.csv")
    written = [Path("dataset.csv")]
    if holdout is not None:
        holdout.to_csv(out / "holdout.csv")
        written.append(Path("holdout.csv"))
    _write_manifest(out, "export-dataset", cfg, written,
                    {"dataset_sha256": {str(seed): train.digest()}, "y_min": task.y_min, "y_max": task.y_max})
    print(f"{task.id}: {train.n} training rows, {0 if holdout is None else holdout.n} holdout rows -> {out}")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boss-opt", description="Sensitivity-regularized offline optimization.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True, out=True):
        sp.add_argument("--config", help="key = value config file or a manifest.json")
        sp.add_argument("--task", help="override task.id")
        sp.add_argument("--mode", help="override boss.mode")
        if seeds:
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--seed", type=int, help="single seed")
            g.add_argument("--seeds", help="comma-separated seeds")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = sub.add_parser("run", help="train, search and score every seed")
    common(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("verify", help="gradient and estimator self-checks")
    sp.add_argument("--quick", action="store_true", help="fewer probes")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("bench", help="training time against the perturbation count m")
    common(sp)
    sp.add_argument("--m", default="25,50,100,200,400", help="ascending comma-separated m values")
    sp.add_argument("--repeats", type=int, default=3)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("tune", help="pick tune.key from tune.values with a pseudo-oracle")
    common(sp)
    sp.set_defaults(fn=cmd_tune)

    sp = sub.add_parser("export-dataset", help="write the offline training and holdout sets")
    common(sp)
    sp.set_defaults(fn=cmd_export_dataset)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ContractError, FileNotFoundError) as exc:
        print(f"boss-opt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
