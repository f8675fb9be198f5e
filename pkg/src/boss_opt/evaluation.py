"""Percentile scoring, aggregation over seeds, OOD error and timing."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import OfflineDataset, normalize_scores
from .surrogate import SurrogateParams, predict
from .tasks import TaskSpec, oracle_eval_batch

log = logging.getLogger(__name__)

PERCENTILES = (50, 75, 100)


@dataclass(frozen=True)
class PercentileReport:
    p50: float
    p75: float
    p100: float
    seed: int = 0
    task: str = ""
    method: str = ""
    clipped: int = 0


@dataclass(frozen=True)
class AggregateReport:
    task: str
    method: str
    regularizer: str
    mean: dict
    std: dict
    seeds: int


def percentile_indices(K: int):
    """Sorted positions of the 50th, 75th and 100th percentile among K."""
    return tuple(math.ceil(q / 100 * K) - 1 for q in PERCENTILES)


def score_candidates(task: TaskSpec, candidates, seed: int = 0, method: str = "") -> PercentileReport:
    X = np.asarray(candidates.designs, dtype=float)
    outside = ~task.contains(X)
    if outside.any():
        log.warning("%d candidates outside the %s box were clipped before scoring", int(outside.sum()), task.id)
        X = task.clip(X)
    s = np.sort(normalize_scores(oracle_eval_batch(task, X), task.y_min, task.y_max))
    i50, i75, i100 = percentile_indices(len(s))
    return PercentileReport(float(s[i50]), float(s[i75]), float(s[i100]), seed, task.id, method, int(outside.sum()))


def aggregate(reports: Sequence[PercentileReport], regularizer: str = "", rmse=None) -> AggregateReport:
    """Mean and population standard deviation across seeds."""
    cols = {f"p{q}": np.array([getattr(r, f"p{q}") for r in reports]) for q in PERCENTILES}
    if rmse is not None:
        cols["rmse_ood"] = np.asarray(rmse, dtype=float)
    return AggregateReport(
        reports[0].task,
        reports[0].method,
        regularizer,
        {k: float(v.mean()) for k, v in cols.items()},
        {k: float(v.std()) for k, v in cols.items()},
        len(reports),
    )


def rmse_ood(phi, holdout: OfflineDataset) -> float:
    """Root-mean-square error on held-out designs, in raw score units.

    ``phi`` may be a list of surrogates, in which case their mean prediction
    is scored.
    """
    if isinstance(phi, SurrogateParams):
        pred = predict(phi, holdout.X)
    else:
        pred = np.mean([predict(p, holdout.X) for p in phi], axis=0)
    return float(np.sqrt(np.mean((pred - holdout.y) ** 2)))


RESULT_COLUMNS = ("task", "method", "regularizer", "seed", "p50", "p75", "p100", "rmse_ood")
AGGREGATE_COLUMNS = ("task", "method", "regularizer", "stat", "seeds", "p50", "p75", "p100", "rmse_ood")


def write_results(path, rows) -> None:
    """``rows`` are dicts keyed by :data:`RESULT_COLUMNS`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])


def write_aggregate(path, aggs: Sequence[AggregateReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for a in aggs:
            for stat, vals in (("mean", a.mean), ("std", a.std)):
                w.writerow([a.task, a.method, a.regularizer, stat, a.seeds]
                           + [_fmt(vals.get(c, float("nan"))) for c in AGGREGATE_COLUMNS[5:]])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def runtime_scaling(data, spec, cfg, m_values: Sequence[int], phi_init=None, repeats: int = 3):
    """Wall time of ``boss_train`` for each ``m``; best of ``repeats`` runs.

    Returns a list of ``(m, seconds)``.
    """
    from .boss import boss_train
    from .core import SeededRng
    from .surrogate import init_params

    if list(m_values) != sorted(m_values) or not m_values:
        raise ValueError("m_values must be a non-empty ascending list")
    phi_init = phi_init if phi_init is not None else init_params(spec, SeededRng(cfg.seed).child("init"))
    rows = []
    for m in m_values:
        c = cfg.replace(m=int(m))
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            boss_train(data, spec, c, phi_init)
            best = min(best, time.perf_counter() - t0)
        rows.append((int(m), best))
    return rows


def linear_fit(xs, ys):
    """Least-squares slope, intercept and R^2."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, icept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icept), r2


@dataclass(frozen=True)
class TuneRanking:
    configs: tuple
    pseudo: np.ndarray  # (configs, seeds) pseudo-oracle p100
    true: np.ndarray = None  # same shape, true-oracle p100; None if not computed

    @property
    def pseudo_best(self) -> int:
        return int(np.argmax(self.pseudo.mean(axis=1)))  # argmax keeps the first of equal means

    @property
    def true_best(self) -> int:
        return int(np.argmax(self.true.mean(axis=1)))


def pseudo_percentile(base: SurrogateParams, task: TaskSpec, designs) -> float:
    """p100 of the candidate set as judged by ``base`` instead of the oracle."""
    X = task.clip(np.asarray(designs, dtype=float))
    s = np.sort(normalize_scores(predict(base, X), task.y_min, task.y_max))
    return float(s[percentile_indices(len(s))[2]])


def _tune_candidates(configs, task, data, seeds, run_cfg):
    from .pipeline import derive_seed, pretrained, search_candidates
    from .boss import boss_train

    out = []
    for cfg in configs:
        row = []
        for seed in seeds:
            phi0 = pretrained(run_cfg, data, seed)
            phi, _ = boss_train(data, phi0.spec, cfg.replace(seed=derive_seed(seed, "boss", 0)), phi0)
            row.append(search_candidates(run_cfg, task, data, [phi], seed))
        out.append(row)
    return out


def rank_configs(base_surrogate, configs, task, data, seeds, run_cfg=None, with_true=False) -> TuneRanking:
    """Pseudo-oracle scores for every ``(config, seed)``, plus true-oracle
    scores of the same candidates when ``with_true`` is set.

    The pseudo scores are computed first and the oracle call counter is
    checked before any true evaluation happens.
    """
    from .config import RunConfig
    from .tasks import ORACLE_CALLS

    if not configs:
        raise ValueError("no configurations to rank")
    run_cfg = run_cfg if run_cfg is not None else RunConfig({"task.id": task.id, "search.method": "ga"})
    before = ORACLE_CALLS.calls
    cands = _tune_candidates(configs, task, data, seeds, run_cfg)
    pseudo = np.array([[pseudo_percentile(base_surrogate, task, c.designs) for c in row] for row in cands])
    if ORACLE_CALLS.calls != before:
        raise AssertionError("the true oracle was queried during pseudo-oracle selection")
    true = None
    if with_true:
        true = np.array([[score_candidates(task, c, s).p100 for c, s in zip(row, seeds)] for row in cands])
    return TuneRanking(tuple(configs), pseudo, true)


def pseudo_oracle_tune(base_surrogate, configs, task, data, seeds, run_cfg=None):
    """Configuration with the highest mean pseudo-oracle p100; ties go to the first listed."""
    if len(configs) == 1:
        return configs[0]
    r = rank_configs(base_surrogate, configs, task, data, seeds, run_cfg)
    return configs[r.pseudo_best]
