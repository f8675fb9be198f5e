"""Shared containers, score normalization and the seeded random source."""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class OfflineDataset:
    """Fixed ``(design, score)`` pairs plus the task-wide score range.

    ``y_min``/``y_max`` describe the whole task, not this sample, and are
    only used to normalize reported scores.
    """

    X: np.ndarray
    y: np.ndarray
    y_min: float
    y_max: float

    def __post_init__(self):
        X = _frozen(self.X)
        y = _frozen(self.y).reshape(-1)
        if X.ndim == 1:
            X = _frozen(X.reshape(-1, 1))
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ContractError(f"X has shape {X.shape} but y has {y.shape[0]} entries")
        if X.shape[0] < 1:
            raise ContractError("dataset must hold at least one point")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ContractError("dataset contains non-finite values")
        if not self.y_min < self.y_max:
            raise ContractError(f"degenerate score range [{self.y_min}, {self.y_max}]")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "y_min", float(self.y_min))
        object.__setattr__(self, "y_max", float(self.y_max))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "OfflineDataset":
        return OfflineDataset(self.X[idx], self.y[idx], self.y_min, self.y_max)

    def digest(self) -> str:
        """SHA-256 over the raw bytes of designs and scores."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        header = ",".join([f"x_{j}" for j in range(self.d)] + ["y"])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for xi, yi in zip(self.X, self.y):
                fh.write(",".join(repr(float(v)) for v in (*xi, yi)) + "\n")

    @classmethod
    def from_csv(cls, path, y_min: float, y_max: float) -> "OfflineDataset":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if header[-1] != "y" or any(h != f"x_{j}" for j, h in enumerate(header[:-1])):
            raise ContractError(f"unexpected dataset header {header}")
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(arr[:, :-1], arr[:, -1], y_min, y_max)


@dataclass(frozen=True)
class NormalizedScore:
    value: float
    out_of_range: bool = False

    def __float__(self):
        return self.value


def normalize_score(y: float, y_min: float, y_max: float) -> NormalizedScore:
    """Map a raw score to ``|y - y_min| / |y_max - y_min|``.

    Scores outside ``[y_min, y_max]`` are returned unclipped and flagged.
    """
    if not y_max > y_min:
        raise ContractError(f"degenerate range: y_max={y_max} <= y_min={y_min}")
    if not np.isfinite(y):
        raise ContractError("score must be finite")
    value = abs(y - y_min) / abs(y_max - y_min)
    return NormalizedScore(float(value), out_of_range=bool(y < y_min or y > y_max))


def normalize_scores(y, y_min: float, y_max: float) -> np.ndarray:
    """Vectorized :func:`normalize_score` without the flag."""
    if not y_max > y_min:
        raise ContractError(f"degenerate range: y_max={y_max} <= y_min={y_min}")
    return np.abs(np.asarray(y, dtype=float) - y_min) / abs(y_max - y_min)


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode())


@dataclass
class SeededRng:
    """Seeded generator that can derive independent labelled sub-streams.

    ``child("init")`` always yields the same stream for the same seed, no
    matter how many draws were taken from the parent or other children.
    """

    seed: int
    path: tuple = ()
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed)
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *labels) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(_label_key(lab) for lab in labels))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low, high, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def gaussian_sample(rng: SeededRng, count: int) -> np.ndarray:
    if count < 1:
        raise ContractError("count must be >= 1")
    return rng.normal(count)
