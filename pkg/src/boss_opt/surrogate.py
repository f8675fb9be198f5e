"""Fully connected surrogate ``g(x; phi)`` stored as one flat parameter vector.

Gradients are hand-written backprop. Layer ``l`` occupies a contiguous block
of the flat vector: its weight matrix ``(fan_out, fan_in)`` in row-major
order followed by its bias.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import ContractError, OfflineDataset, SeededRng

log = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or sizes[-1] != 1 or min(sizes) < 1:
            raise ContractError(f"invalid layer sizes {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @classmethod
    def default(cls, d: int, hidden: Sequence[int] = (64, 64), activation="tanh"):
        return cls((d, *hidden, 1), activation)

    @property
    def d(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(fo * fi + fo for fi, fo in zip(s[:-1], s[1:]))

    def describe(self) -> str:
        return f"mlp {','.join(map(str, self.layer_sizes))} {self.activation}"


@dataclass(frozen=True)
class SurrogateParams:
    flat: np.ndarray
    spec: MlpSpec

    def __post_init__(self):
        flat = np.array(self.flat, dtype=float).reshape(-1)
        if flat.shape[0] != self.spec.n_params:
            raise ContractError(
                f"expected {self.spec.n_params} parameters, got {flat.shape[0]}"
            )
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)

    def __len__(self):
        return self.flat.shape[0]

    def replace(self, flat) -> "SurrogateParams":
        return SurrogateParams(flat, self.spec)

    def layers(self):
        return _unpack(self.flat, self.spec)

    def to_text(self) -> str:
        lines = [self.spec.describe()]
        lines.extend(format(v, ".17g") for v in self.flat)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SurrogateParams":
        lines = text.strip().splitlines()
        parts = lines[0].split()
        if len(parts) != 3 or parts[0] != "mlp":
            raise ContractError(f"bad surrogate header {lines[0]!r}")
        spec = MlpSpec(tuple(int(s) for s in parts[1].split(",")), parts[2])
        return cls(np.array([float(v) for v in lines[1:]]), spec)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "SurrogateParams":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _unpack(flat, spec: MlpSpec):
    layers = []
    i = 0
    s = spec.layer_sizes
    for fi, fo in zip(s[:-1], s[1:]):
        W = flat[i : i + fo * fi].reshape(fo, fi)
        i += fo * fi
        b = flat[i : i + fo]
        i += fo
        layers.append((W, b))
    return layers


def init_params(spec: MlpSpec, rng: SeededRng) -> SurrogateParams:
    """Glorot-uniform weights, zero biases."""
    parts = []
    s = spec.layer_sizes
    for fi, fo in zip(s[:-1], s[1:]):
        lim = np.sqrt(6.0 / (fi + fo))
        parts.append(rng.uniform(-lim, lim, fo * fi))
        parts.append(np.zeros(fo))
    return SurrogateParams(np.concatenate(parts), spec)


def _as_batch(X, d):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if d > 1 or X.shape[0] == 1 else X.reshape(-1, 1)
    if X.shape[1] != d:
        raise ContractError(f"design dimension {X.shape[1]} does not match surrogate input {d}")
    return X


def _forward(flat, spec: MlpSpec, X):
    layers = _unpack(flat, spec)
    acts = [X]
    a = X
    last = len(layers) - 1
    for l, (W, b) in enumerate(layers):
        z = a @ W.T + b
        if l < last:
            a = np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)
        else:
            a = z
        acts.append(a)
    return a[:, 0], acts


def _backward(flat, spec: MlpSpec, acts, dy, want_params=True):
    """Pull ``dy`` (one weight per row) back to parameter and input gradients.

    Returns ``(sum_i dy_i * dg(x_i)/dphi, dy_i * dg(x_i)/dx_i)``.
    """
    layers = _unpack(flat, spec)
    delta = np.asarray(dy, dtype=float).reshape(-1, 1)
    grads = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        if want_params:
            grads[l] = ((delta.T @ acts[l]).ravel(), delta.sum(axis=0))
        delta = delta @ W
        if l > 0:
            a = acts[l]
            if spec.activation == "tanh":
                delta = delta * (1.0 - a * a)
            else:
                delta = delta * (a > 0.0)
    gflat = np.concatenate([p for pair in grads for p in pair]) if want_params else None
    return gflat, delta


def predict(phi: SurrogateParams, X) -> np.ndarray:
    X = _as_batch(X, phi.spec.d)
    return _forward(phi.flat, phi.spec, X)[0]


def mlp_forward(phi: SurrogateParams, x) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != phi.spec.d:
        raise ContractError(f"design dimension {x.shape[0]} does not match surrogate input {phi.spec.d}")
    return float(predict(phi, x.reshape(1, -1))[0])


def mean_pred(phi: SurrogateParams, data: OfflineDataset) -> float:
    """h(phi): average prediction over the offline designs."""
    return float(np.mean(predict(phi, data.X)))


def loss_and_grad(phi: SurrogateParams, batch: OfflineDataset):
    """Mean squared error over ``batch`` and its exact gradient."""
    X = _as_batch(batch.X, phi.spec.d)
    out, acts = _forward(phi.flat, phi.spec, X)
    r = out - batch.y
    n = X.shape[0]
    g, _ = _backward(phi.flat, phi.spec, acts, 2.0 * r / n)
    return float(np.mean(r * r)), g


def full_loss(phi: SurrogateParams, data: OfflineDataset) -> float:
    r = predict(phi, data.X) - data.y
    return float(np.mean(r * r))


def mean_pred_grad(phi: SurrogateParams, data: OfflineDataset) -> np.ndarray:
    """Gradient of h(phi) = mean_x g(x; phi) over the full dataset."""
    return _mean_pred_grad_flat(phi.flat, phi.spec, data.X)


def _mean_pred_grad_flat(flat, spec, X):
    X = _as_batch(X, spec.d)
    _, acts = _forward(flat, spec, X)
    n = X.shape[0]
    g, _ = _backward(flat, spec, acts, np.full(n, 1.0 / n))
    return g


def input_grads(phi: SurrogateParams, X) -> np.ndarray:
    """Rows of ``grad_x g(x; phi)`` for each design in ``X``."""
    X = _as_batch(X, phi.spec.d)
    _, acts = _forward(phi.flat, phi.spec, X)
    _, dx = _backward(phi.flat, phi.spec, acts, np.ones(X.shape[0]), want_params=False)
    return dx


def input_grad(phi: SurrogateParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return input_grads(phi, x)[0]


def hvp_step(phi_flat, v) -> float:
    return 1e-4 * max(1.0, float(np.max(np.abs(phi_flat)))) / max(1e-12, float(np.max(np.abs(v))))


def hvp_mean_pred(phi: SurrogateParams, data: OfflineDataset, v, method: str = "fd") -> np.ndarray:
    """Hessian of h(phi) applied to ``v``.

    ``fd`` differences the analytic gradient along ``v``; ``exact-small``
    assembles the dense Hessian and is meant as a test oracle only.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != len(phi):
        raise ContractError("v is not aligned with phi")
    if method == "exact-small":
        return dense_hessian(phi, data) @ v
    if method != "fd":
        raise ContractError(f"unknown hvp method {method!r}")
    if not np.any(v):
        return np.zeros_like(v)
    r = hvp_step(phi.flat, v)
    for _ in range(9):
        hv = (
            _mean_pred_grad_flat(phi.flat + r * v, phi.spec, data.X)
            - _mean_pred_grad_flat(phi.flat - r * v, phi.spec, data.X)
        ) / (2.0 * r)
        if np.all(np.isfinite(hv)):
            return hv
        r *= 0.5
    raise FloatingPointError("Hessian-vector product is not finite after 8 step halvings")


def dense_hessian(phi: SurrogateParams, data: OfflineDataset, step: float = 1e-5) -> np.ndarray:
    p = len(phi)
    if p > 200:
        raise ContractError(f"dense Hessian limited to 200 parameters, got {p}")
    H = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = step
        H[:, j] = (
            _mean_pred_grad_flat(phi.flat + e, phi.spec, data.X)
            - _mean_pred_grad_flat(phi.flat - e, phi.spec, data.X)
        ) / (2 * step)
    return 0.5 * (H + H.T)


def minibatch_stream(n: int, batch_size: Optional[int], rng: SeededRng) -> Iterator[np.ndarray]:
    """Endless stream of index batches, reshuffled every epoch.

    With ``batch_size=None`` every batch is the full index range in order
    and ``rng`` is never touched.
    """
    if batch_size is None or batch_size >= n:
        full = np.arange(n)
        while True:
            yield full
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield perm[i : i + batch_size]


def steps_per_epoch(n: int, batch_size: Optional[int]) -> int:
    if batch_size is None or batch_size >= n:
        return 1
    return -(-n // batch_size)


def gd_step(flat, grad, lr, velocity=None, momentum=0.0):
    """One (optionally heavy-ball) descent step; returns ``(flat, velocity)``."""
    if momentum:
        velocity = grad if velocity is None else momentum * velocity + grad
        return flat - lr * velocity, velocity
    return flat - lr * grad, None


def train_surrogate(
    data: OfflineDataset,
    spec: MlpSpec,
    epochs: int,
    lr: float,
    batch_size: Optional[int],
    rng: SeededRng,
    momentum: float = 0.0,
    phi_init: Optional[SurrogateParams] = None,
    history: Optional[list] = None,
) -> SurrogateParams:
    """Mini-batch gradient descent on the squared-error fit loss.

    Initial parameters come from ``rng.child("init")`` unless given, batches
    from ``rng.child("minibatch")``. If ``history`` is a list, the parameter
    vector after every step is appended to it.
    """
    if epochs < 1:
        raise ContractError("epochs must be >= 1")
    if lr <= 0:
        raise ContractError("lr must be > 0")
    if spec.d != data.d:
        raise ContractError(f"spec input {spec.d} does not match data dimension {data.d}")
    phi = phi_init if phi_init is not None else init_params(spec, rng.child("init"))
    flat = phi.flat.copy()
    start_loss = full_loss(phi, data)
    batches = minibatch_stream(data.n, batch_size, rng.child("minibatch"))
    velocity = None
    for step in range(epochs * steps_per_epoch(data.n, batch_size)):
        idx = next(batches)
        loss, g = loss_and_grad(SurrogateParams(flat, spec), data.subset(idx))
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step} (lr={lr}, initial loss {start_loss:.6g})"
            )
        flat, velocity = gd_step(flat, g, lr, velocity, momentum)
        if history is not None:
            history.append(flat.copy())
    out = SurrogateParams(flat, spec)
    end_loss = full_loss(out, data)
    if not np.isfinite(end_loss):
        raise TrainingDiverged(f"non-finite final loss (initial {start_loss:.6g})")
    log.debug("train_surrogate: loss %.6g -> %.6g", start_loss, end_loss)
    return out
