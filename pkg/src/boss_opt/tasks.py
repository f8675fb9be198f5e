"""Analytic black-box tasks with known optima, and offline dataset recipes.

Each task keeps the top of its score distribution out of the training data
so that search has to extrapolate, mimicking how benchmark datasets withhold
the best designs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import optimize

from .core import ContractError, OfflineDataset, SeededRng

TASK_IDS = ("neg-sphere-d8", "neg-ackley-d2", "hidden-linear-d8", "sine-quad-d1")


class _CallCounter:
    """Counts oracle evaluations so selection code can prove it never peeks."""

    def __init__(self):
        self.calls = 0

    def reset(self):
        self.calls = 0


ORACLE_CALLS = _CallCounter()


@dataclass(frozen=True)
class TaskSpec:
    id: str
    lo: np.ndarray
    hi: np.ndarray
    fn: Callable = field(repr=False, compare=False)
    y_min: float = 0.0
    y_max: float = 0.0
    x_star: np.ndarray = None

    @property
    def d(self) -> int:
        return self.lo.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, X, tol: float = 0.0) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.all((X >= self.lo - tol) & (X <= self.hi + tol), axis=1)

    def clip(self, X) -> np.ndarray:
        return np.clip(X, self.lo, self.hi)


def oracle_eval_batch(task: TaskSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if task.d > 1 else X.reshape(-1, 1)
    if X.shape[1] != task.d:
        raise ContractError(f"{task.id} expects dimension {task.d}, got {X.shape[1]}")
    if not np.all(task.contains(X)):
        raise ContractError(f"{task.id}: design outside the domain box")
    ORACLE_CALLS.calls += X.shape[0]
    return task.fn(X)


def oracle_eval(task: TaskSpec, x) -> float:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(oracle_eval_batch(task, x)[0])


def _sphere_center():
    return np.array([0.62, 0.71, 0.58, 0.66, 0.69, 0.60, 0.64, 0.73])


def _neg_sphere(X):
    return -np.sum((X - _sphere_center()) ** 2, axis=1)


def _neg_ackley(X):
    d = X.shape[1]
    r = np.sqrt(np.sum(X * X, axis=1) / d)
    c = np.sum(np.cos(2 * np.pi * X), axis=1) / d
    # exp(1) - exp(c) written so the optimum evaluates to exactly 0
    return 20.0 * np.exp(-0.2 * r) - 20.0 + np.exp(c) - np.e


def _hidden_weights():
    w = np.random.default_rng(20240601).standard_normal(8)
    return 2.0 * w / np.linalg.norm(w)


def _hidden_linear(X):
    # row-wise sum rather than matmul so a point scores identically in any batch
    return np.sum(X * _hidden_weights(), axis=1)


def _sine_quad(X):
    x = X[:, 0]
    return np.sin(3.0 * x) - 0.5 * x * x


def _refine_extreme(fn, lo, hi, sign, grid_per_dim):
    """Global extreme of a smooth low-dimensional fn: dense grid, then L-BFGS-B."""
    axes = [np.linspace(a, b, grid_per_dim) for a, b in zip(lo, hi)]
    G = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    vals = sign * fn(G)
    best = None
    for i in np.argsort(vals)[:8]:
        res = optimize.minimize(
            lambda x: sign * fn(x.reshape(1, -1))[0],
            G[i],
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
            options={"ftol": 1e-15, "gtol": 1e-12},
        )
        cand = (min(res.fun, vals[i]), res.x if res.fun <= vals[i] else G[i])
        if best is None or cand[0] < best[0]:
            best = cand
    return sign * best[0], best[1]


@lru_cache(maxsize=None)
def get_task(task_id: str) -> TaskSpec:
    if task_id == "neg-sphere-d8":
        lo, hi = np.zeros(8), np.ones(8)
        c = _sphere_center()
        far = np.where(c > 0.5, lo, hi)
        return TaskSpec(task_id, lo, hi, _neg_sphere, float(_neg_sphere(far[None])[0]), 0.0, c)
    if task_id == "hidden-linear-d8":
        lo, hi = np.zeros(8), np.ones(8)
        w = _hidden_weights()
        best = np.where(w > 0, hi, lo)
        worst = np.where(w > 0, lo, hi)
        return TaskSpec(
            task_id, lo, hi, _hidden_linear,
            float(_hidden_linear(worst[None])[0]), float(_hidden_linear(best[None])[0]), best,
        )
    if task_id == "neg-ackley-d2":
        lo, hi = np.full(2, -2.0), np.full(2, 2.0)
        # 2 * 4 / 0.005 + 1 grid puts a node on every integer and half-integer
        y_min, _ = _refine_extreme(_neg_ackley, lo, hi, sign=1.0, grid_per_dim=801)
        return TaskSpec(task_id, lo, hi, _neg_ackley, y_min - 1e-12, 0.0, np.zeros(2))
    if task_id == "sine-quad-d1":
        lo, hi = np.array([-2.0]), np.array([2.0])
        y_min, _ = _refine_extreme(_sine_quad, lo, hi, sign=1.0, grid_per_dim=4001)
        y_max, x_star = _refine_extreme(_sine_quad, lo, hi, sign=-1.0, grid_per_dim=4001)
        return TaskSpec(task_id, lo, hi, _sine_quad, y_min - 1e-12, y_max, np.asarray(x_star))
    raise ContractError(f"unknown task {task_id!r}; choose from {', '.join(TASK_IDS)}")


@dataclass(frozen=True)
class DatasetRecipe:
    n_raw: int = 1000
    keep_fraction: float = 0.4
    holdout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_raw < 10:
            raise ContractError("n_raw must be >= 10")
        if not 0 < self.keep_fraction <= 1:
            raise ContractError("keep_fraction must lie in (0, 1]")
        if not 0 <= self.holdout_fraction < 1:
            raise ContractError("holdout_fraction must lie in [0, 1)")
        if self.keep_fraction + self.holdout_fraction > 1 + 1e-12:
            raise ContractError("keep_fraction + holdout_fraction exceeds 1")


def make_offline_dataset(task: TaskSpec, recipe: DatasetRecipe):
    """Uniform sample of the box, split by score.

    Returns ``(train, holdout)``: the bottom ``keep_fraction`` and the top
    ``holdout_fraction`` of the sorted sample. ``holdout`` is ``None`` when
    ``holdout_fraction`` is zero.
    """
    rng = SeededRng(recipe.seed).child("dataset", task.id)
    X = rng.uniform(task.lo, task.hi, (recipe.n_raw, task.d))
    y = oracle_eval_batch(task, X)
    order = np.argsort(y, kind="stable")
    X, y = X[order], y[order]
    n_keep = int(round(recipe.keep_fraction * recipe.n_raw))
    n_hold = int(round(recipe.holdout_fraction * recipe.n_raw))
    train = OfflineDataset(X[:n_keep], y[:n_keep], task.y_min, task.y_max)
    if n_hold == 0:
        return train, None
    holdout = OfflineDataset(X[-n_hold:], y[-n_hold:], task.y_min, task.y_max)
    if not train.y.max() < holdout.y.min():
        raise ContractError("score tie straddles the train/holdout boundary")
    return train, holdout
