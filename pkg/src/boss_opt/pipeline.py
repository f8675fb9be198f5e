"""One seed of the offline-optimization protocol: data, training, search, scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .boss import BossConfig, boss_train
from .config import RunConfig
from .core import SeededRng
from .evaluation import PercentileReport, rmse_ood, score_candidates
from .search import CandidateSet, SearchConfig, ensemble_search, ga_search
from .surrogate import MlpSpec, init_params, train_surrogate
from .tasks import DatasetRecipe, get_task, make_offline_dataset

log = logging.getLogger(__name__)


def derive_seed(seed: int, *labels) -> int:
    return int(SeededRng(seed).child(*labels).generator.integers(0, 2**62))


@dataclass
class SeedResult:
    seed: int
    report: PercentileReport
    rmse_ood: float
    candidates: CandidateSet
    surrogates: list
    traces: list
    dataset_digest: str


def build_data(cfg: RunConfig, seed: int):
    task = get_task(cfg["task.id"])
    recipe = DatasetRecipe(cfg["data.n_raw"], cfg["data.keep_fraction"], cfg["data.holdout_fraction"], seed)
    train, holdout = make_offline_dataset(task, recipe)
    return task, train, holdout


def pretrained(cfg: RunConfig, train, seed: int, member: int = 0):
    """Initial surrogate shared by every regularizer mode for this seed."""
    spec = MlpSpec.default(train.d, cfg["surrogate.hidden"], cfg["surrogate.activation"])
    rng = SeededRng(seed).child("member", member, "pretrain")
    if cfg["pretrain.epochs"] > 0:
        return train_surrogate(train, spec, cfg["pretrain.epochs"], cfg["pretrain.lr"], cfg["pretrain.batch_size"], rng)
    return init_params(spec, rng.child("init"))


def train_members(cfg: RunConfig, train, seed: int, boss: BossConfig = None):
    boss = boss if boss is not None else cfg.boss
    n = 1 if cfg["search.method"] == "ga" else cfg["search.ensemble_size"]
    phis, traces = [], []
    for j in range(n):
        phi0 = pretrained(cfg, train, seed, j)
        phi, trace = boss_train(train, phi0.spec, boss.replace(seed=derive_seed(seed, "boss", j)), phi0)
        phis.append(phi)
        traces.append(trace)
    return phis, traces


def search_candidates(cfg: RunConfig, task, train, phis, seed: int) -> CandidateSet:
    scfg = SearchConfig.for_task(task, cfg["search.K"], cfg["search.steps"], cfg["search.rel_step"], seed)
    method = cfg["search.method"]
    if method == "ga":
        return ga_search(phis[0], scfg, train)
    return ensemble_search(phis, method.split("-")[1], scfg, train)


def run_seed(cfg: RunConfig, seed: int) -> SeedResult:
    task, train, holdout = build_data(cfg, seed)
    phis, traces = train_members(cfg, train, seed)
    cands = search_candidates(cfg, task, train, phis, seed)
    report = score_candidates(task, cands, seed, cfg["search.method"])
    err = rmse_ood(phis[0] if len(phis) == 1 else phis, holdout) if holdout is not None else float("nan")
    log.info("%s seed %d mode %s: p100 %.4f rmse_ood %.4f", task.id, seed, cfg["boss.mode"], report.p100, err)
    return SeedResult(seed, report, err, cands, phis, traces, train.digest())


def pseudo_oracle(cfg: RunConfig, train, seed: int):
    """Plain surrogate, trained on its own stream, used to judge tuning runs."""
    spec = MlpSpec.default(train.d, cfg["surrogate.hidden"], cfg["surrogate.activation"])
    rng = SeededRng(seed).child("pseudo-oracle")
    return train_surrogate(train, spec, max(cfg["pretrain.epochs"], 1), cfg["pretrain.lr"], cfg["pretrain.batch_size"], rng)
