"""Gradient-ascent design search on trained surrogates."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ContractError, OfflineDataset
from .surrogate import SurrogateParams, input_grads, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    K: int = 128
    steps: int = 50
    step_size: object = 0.05  # scalar or per-dimension vector
    clip_box: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if np.any(np.asarray(self.step_size) <= 0):
            raise ContractError("step_size must be > 0")

    @classmethod
    def for_task(cls, task, K=128, steps=50, rel_step=0.05, seed=0) -> "SearchConfig":
        """Step of ``rel_step`` box widths per dimension, clipped to the box."""
        return cls(K, steps, rel_step * task.width, (task.lo, task.hi), seed)


@dataclass
class CandidateSet:
    designs: np.ndarray
    surrogate_scores: np.ndarray
    flagged: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flagged is None:
            self.flagged = np.zeros(len(self.designs), dtype=bool)

    @property
    def K(self) -> int:
        return self.designs.shape[0]

    def to_csv(self, path) -> None:
        d = self.designs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x_{j}" for j in range(d)] + ["surrogate_score"])
            for x, s in zip(self.designs, self.surrogate_scores):
                w.writerow([repr(float(v)) for v in x] + [repr(float(s))])

    @classmethod
    def from_csv(cls, path) -> "CandidateSet":
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(arr[:, :-1], arr[:, -1])


def init_candidates(data: OfflineDataset, K: int) -> np.ndarray:
    """The ``K`` highest-scoring designs; equal scores keep dataset order."""
    if K > data.n:
        raise ContractError(f"K={K} exceeds dataset size {data.n}")
    order = np.argsort(-data.y, kind="stable")
    return data.X[order[:K]].copy()


def _ascend(X, grad_fn, value_fn, cfg: SearchConfig):
    step = np.asarray(cfg.step_size, dtype=float)
    alive = np.ones(X.shape[0], dtype=bool)
    for _ in range(cfg.steps):
        if not alive.any():
            break
        G = grad_fn(X[alive])
        nxt = X[alive] + step * G
        if cfg.clip_box is not None:
            nxt = np.clip(nxt, cfg.clip_box[0], cfg.clip_box[1])
        ok = np.all(np.isfinite(nxt), axis=1)
        rows = np.flatnonzero(alive)
        X[rows[ok]] = nxt[ok]
        if not ok.all():
            log.warning("search: %d chains hit non-finite values and were frozen", int((~ok).sum()))
            alive[rows[~ok]] = False
    return X, value_fn(X), ~alive


def ga_search(phi: SurrogateParams, cfg: SearchConfig, data: OfflineDataset) -> CandidateSet:
    """``x <- x + step * grad_x g(x)`` from the top-``K`` offline designs."""
    X = init_candidates(data, cfg.K)
    X, scores, flagged = _ascend(X, lambda Z: input_grads(phi, Z), lambda Z: predict(phi, Z), cfg)
    return CandidateSet(X, scores, flagged, {"method": "ga", "steps": cfg.steps})


def ensemble_value(phis: Sequence[SurrogateParams], X, mode: str) -> np.ndarray:
    P = np.stack([predict(p, X) for p in phis])
    return P.min(axis=0) if mode == "min" else P.mean(axis=0)


def ensemble_grad(phis: Sequence[SurrogateParams], X, mode: str) -> np.ndarray:
    if mode == "mean":
        return sum(input_grads(p, X) for p in phis) / len(phis)
    P = np.stack([predict(p, X) for p in phis])
    active = np.argmin(P, axis=0)  # first minimum, i.e. lowest member index
    G = np.empty_like(np.asarray(X, dtype=float))
    for k, p in enumerate(phis):
        rows = active == k
        if rows.any():
            G[rows] = input_grads(p, X[rows])
    return G


def ensemble_search(phis: Sequence[SurrogateParams], mode: str, cfg: SearchConfig, data: OfflineDataset) -> CandidateSet:
    if len(phis) < 2:
        raise ContractError("an ensemble needs at least two surrogates")
    if mode not in ("min", "mean"):
        raise ContractError(f"unknown ensemble mode {mode!r}")
    if len({p.spec for p in phis}) != 1:
        raise ContractError("ensemble members must share one architecture")
    X = init_candidates(data, cfg.K)
    X, scores, flagged = _ascend(
        X, lambda Z: ensemble_grad(phis, Z, mode), lambda Z: ensemble_value(phis, Z, mode), cfg
    )
    return CandidateSet(X, scores, flagged, {"method": f"ens-{mode}", "members": len(phis)})
