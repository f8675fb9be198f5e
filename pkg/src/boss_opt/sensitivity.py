"""Sensitivity of a surrogate to Gaussian perturbations of its parameters.

For a perturbation ``gamma ~ N(mu * 1, sigma^2 I)`` of the flat parameter
vector, the shift of the dataset-mean prediction is

    A(phi, gamma) = |h(phi + gamma) - h(phi)|,   h(phi) = mean_x g(x; phi)

and the sensitivity is ``Pr(A >= alpha)``. This module estimates that
probability four ways (Monte Carlo, a fitted membership classifier, the
squared upper bound ``E[min(1, (A/alpha)^2)]`` and a closed form through the
Gaussian CDF) and provides the gradients needed to ascend in ``(mu, sigma)``
and descend in ``phi``.

``mu`` and ``sigma`` are scalars shared by every coordinate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import ContractError, OfflineDataset, SeededRng
from .surrogate import (
    SurrogateParams,
    hvp_mean_pred,
    input_grads,
    mean_pred_grad,
    predict,
)

log = logging.getLogger(__name__)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class PerturbationParams:
    mu: float
    sigma: float
    mu_lo: float = -1e-3
    mu_hi: float = 1e-3
    sigma_lo: float = 1e-5
    sigma_hi: float = 1e-2

    def __post_init__(self):
        if not (self.mu_lo <= self.mu_hi and 0 < self.sigma_lo <= self.sigma_hi):
            raise ContractError(
                f"invalid bounds mu [{self.mu_lo}, {self.mu_hi}] sigma [{self.sigma_lo}, {self.sigma_hi}]"
            )
        if not self.mu_lo <= self.mu <= self.mu_hi:
            raise ContractError(f"mu={self.mu} outside [{self.mu_lo}, {self.mu_hi}]")
        if not self.sigma_lo <= self.sigma <= self.sigma_hi:
            raise ContractError(f"sigma={self.sigma} outside [{self.sigma_lo}, {self.sigma_hi}]")

    @property
    def bounds(self):
        return (self.mu_lo, self.mu_hi, self.sigma_lo, self.sigma_hi)


@dataclass(frozen=True)
class PerturbationBatch:
    eps: np.ndarray
    gamma: np.ndarray
    kappa: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.eps.shape[0]

    def at(self, mu: float, sigma: float) -> "PerturbationBatch":
        """Same base noise, re-expressed under new ``(mu, sigma)``; labels dropped."""
        return PerturbationBatch(self.eps, mu + sigma * self.eps)


@dataclass(frozen=True)
class SensitivityEstimate:
    value: float
    stderr: float
    m: int
    method: str

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    probe_count: int


def sample_batch(omega: PerturbationParams, m: int, dim: int, rng: SeededRng) -> PerturbationBatch:
    if m < 1:
        raise ContractError("m must be >= 1")
    eps = rng.normal((m, dim))
    return PerturbationBatch(eps, omega.mu + omega.sigma * eps)


def delta_exact(phi: SurrogateParams, gamma, data: OfflineDataset) -> float:
    """``|h(phi + gamma) - h(phi)|`` from two full forward sweeps."""
    return abs(signed_shift_exact(phi, gamma, data))


def signed_shift_exact(phi, gamma, data) -> float:
    gamma = np.asarray(gamma, dtype=float)
    return float(np.mean(predict(phi.replace(phi.flat + gamma), data.X)) - np.mean(predict(phi, data.X)))


def delta_taylor(grad_h, gamma) -> np.ndarray:
    """``|grad_h . gamma|``; vectorized over rows when ``gamma`` is a matrix."""
    return np.abs(np.asarray(gamma) @ np.asarray(grad_h))


def signed_shifts(gamma, grad_h, mode, phi=None, data=None) -> np.ndarray:
    gamma = np.atleast_2d(gamma)
    if mode == "taylor":
        return gamma @ grad_h
    if mode == "exact":
        base = np.mean(predict(phi, data.X))
        return np.array([np.mean(predict(phi.replace(phi.flat + g), data.X)) - base for g in gamma])
    raise ContractError(f"unknown delta mode {mode!r}")


def label_batch(batch, grad_h, alpha, mode="taylor", phi=None, data=None) -> PerturbationBatch:
    """Attach region labels ``kappa_i = [A_i > alpha]`` (strict)."""
    if not alpha > 0:
        raise ContractError("alpha must be > 0")
    delta = np.abs(signed_shifts(batch.gamma, grad_h, mode, phi, data))
    return replace(batch, kappa=(delta > alpha).astype(float), delta=delta)


def mc_sensitivity(batch: PerturbationBatch) -> SensitivityEstimate:
    if batch.kappa is None:
        raise ContractError("batch is unlabelled")
    p = float(np.mean(batch.kappa))
    return SensitivityEstimate(p, math.sqrt(p * (1.0 - p) / batch.m), batch.m, "mc")


def upper_bound_terms(delta, alpha) -> np.ndarray:
    r = np.asarray(delta) / alpha
    return np.minimum(1.0, r * r)


def upper_bound_sensitivity(batch, grad_h, alpha, mode="taylor", phi=None, data=None) -> SensitivityEstimate:
    """Monte-Carlo mean of ``min(1, (A_i / alpha)^2)``."""
    if not alpha > 0:
        raise ContractError("alpha must be > 0")
    delta = np.abs(signed_shifts(batch.gamma, grad_h, mode, phi, data))
    u = upper_bound_terms(delta, alpha)
    return SensitivityEstimate(float(np.mean(u)), float(np.std(u) / math.sqrt(batch.m)), batch.m, "upper-bound")


def grad_phi_upper_bound(phi: SurrogateParams, batch, alpha, data, mode="taylor-hvp", grad_h=None) -> np.ndarray:
    """Gradient in ``phi`` of the squared upper bound on a frozen batch.

    Saturated samples (``A_i >= alpha``) contribute nothing. In
    ``taylor-hvp`` mode the shift is ``grad_h . gamma`` whose gradient is the
    Hessian of h applied to ``gamma``; since the Hessian is linear, the
    unsaturated samples are folded into one weighted direction and a single
    Hessian-vector product is taken.
    """
    if not alpha > 0:
        raise ContractError("alpha must be > 0")
    m = batch.m
    if mode == "taylor-hvp":
        if grad_h is None:
            grad_h = mean_pred_grad(phi, data)
        D = batch.gamma @ grad_h
        live = np.abs(D) < alpha
        if not np.any(live):
            return np.zeros(len(phi))
        w = (2.0 / (m * alpha * alpha)) * D[live]
        direction = w @ batch.gamma[live]
        return hvp_mean_pred(phi, data, direction)
    if mode == "exact":
        g0 = mean_pred_grad(phi, data)
        h0 = np.mean(predict(phi, data.X))
        out = np.zeros(len(phi))
        for g in batch.gamma:
            shifted = phi.replace(phi.flat + g)
            D = np.mean(predict(shifted, data.X)) - h0
            if abs(D) < alpha:
                out += 2.0 * D * (mean_pred_grad(shifted, data) - g0)
        return out / (m * alpha * alpha)
    raise ContractError(f"unknown phi-gradient mode {mode!r}")


# --- membership classifier -------------------------------------------------


@dataclass(frozen=True)
class PhiNet:
    """|phi| -> 2 tanh units -> sigmoid, on inputs standardized by a frozen
    scalar ``(shift, scale)`` taken from the batch it was fitted on."""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    shift: float
    scale: float
    log_likelihood: float = float("nan")

    def _hidden(self, gamma):
        u = (np.atleast_2d(gamma) - self.shift) / self.scale
        return np.tanh(u @ self.W1.T + self.b1)

    def __call__(self, gamma) -> np.ndarray:
        return _sigmoid(self._hidden(gamma) @ self.w2 + self.b2)

    def input_grad(self, gamma) -> np.ndarray:
        """Rows of ``dPhi/dgamma``."""
        H = self._hidden(gamma)
        p = _sigmoid(H @ self.w2 + self.b2)
        dh = (p * (1 - p))[:, None] * self.w2[None, :] * (1 - H * H)
        return (dh @ self.W1) / self.scale


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def fit_phi_net(
    batch: PerturbationBatch, epochs: int = 50, lr: float = 1e-2, rng: SeededRng = None, gram=None
) -> PhiNet:
    """Full-batch gradient ascent on the Bernoulli log-likelihood of ``kappa``.

    ``gram`` forces the Gram-space (True) or direct (False) update; by
    default the cheaper one is picked.
    """
    if batch.kappa is None:
        raise ContractError("batch is unlabelled")
    if epochs < 1:
        raise ContractError("epochs must be >= 1")
    rng = rng if rng is not None else SeededRng(0)
    G = batch.gamma
    k = batch.kappa
    m, p = G.shape
    if k.min() == k.max():
        log.debug("fit_phi_net: all %d labels equal %g", m, k[0])
    shift = float(np.mean(G))
    scale = float(np.std(G))
    if not scale > 0:
        scale = 1.0
    U = (G - shift) / scale
    lim1 = math.sqrt(6.0 / (p + 2))
    W1_0 = rng.uniform(-lim1, lim1, (2, p))
    b1 = np.zeros(2)
    w2 = rng.uniform(-1.0, 1.0, 2)
    b2 = 0.0
    # Every first-layer update is a combination of the rows of U, so W1 can
    # be tracked as W1_0 + C @ U through the m x m Gram matrix. That costs
    # m^2 |phi| once instead of 2 e m |phi|. The single GEMM runs far closer
    # to peak than the 2 e thin products, so it wins up to about m = 16 e.
    use_gram = m <= 16 * epochs if gram is None else gram
    Z0 = U @ W1_0.T
    if use_gram:
        K = U @ U.T
        C = np.zeros((2, m))
    else:
        W1 = W1_0.copy()
    for _ in range(epochs):
        Z = Z0 + K @ C.T if use_gram else U @ W1.T
        H = np.tanh(Z + b1)
        q = _sigmoid(H @ w2 + b2)
        r = (k - q) / m
        gw2 = H.T @ r
        gb2 = r.sum()
        dZ = r[:, None] * w2[None, :] * (1 - H * H)
        if use_gram:
            C += lr * dZ.T
        else:
            W1 += lr * (dZ.T @ U)
        b1 += lr * dZ.sum(axis=0)
        w2 += lr * gw2
        b2 += lr * gb2
    net = PhiNet(W1_0 + C @ U if use_gram else W1, b1, w2, float(b2), shift, scale)
    q = np.clip(net(G), 1e-300, 1 - 1e-16)
    ll = float(np.mean(k * np.log(q) + (1 - k) * np.log1p(-q)))
    return replace(net, log_likelihood=ll)


def omega_gradients(net: PhiNet, batch: PerturbationBatch):
    """Reparameterized ascent directions for scalar ``(mu, sigma)``.

    Each coordinate of gamma moves one-for-one with ``mu`` and by ``eps`` with
    ``sigma``, so coordinate partials are summed.
    """
    dPhi = net.input_grad(batch.gamma)
    d_mu = float(np.sum(dPhi) / batch.m)
    d_sigma = float(np.sum(batch.eps * dPhi) / batch.m)
    return d_mu, d_sigma


def phi_net_sensitivity(net: PhiNet, batch: PerturbationBatch) -> SensitivityEstimate:
    v = net(batch.gamma)
    return SensitivityEstimate(float(np.mean(v)), float(np.std(v) / math.sqrt(batch.m)), batch.m, "phi-net")


# --- closed form -----------------------------------------------------------


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def norm_pdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def shift_moments(grad_h, omega: PerturbationParams):
    """Mean and standard deviation of ``grad_h . gamma``."""
    g = np.asarray(grad_h, dtype=float)
    return omega.mu * float(np.sum(g)), omega.sigma * float(np.linalg.norm(g))


def _two_sided_tail(mu_z, sigma_z, alpha):
    if sigma_z == 0.0:
        return 1.0 if abs(mu_z) >= alpha else 0.0
    a = (-alpha - mu_z) / sigma_z
    b = (alpha - mu_z) / sigma_z
    # lower tail + upper tail, each through erfc to keep precision far out
    return norm_cdf(a) + norm_cdf(-b)


def cdf_sensitivity(grad_h, omega: PerturbationParams, alpha: float) -> SensitivityEstimate:
    """``Pr(|z| >= alpha)`` for ``z = grad_h . gamma ~ N(mu_z, sigma_z^2)``."""
    if not alpha > 0:
        raise ContractError("alpha must be > 0")
    mu_z, sigma_z = shift_moments(grad_h, omega)
    return SensitivityEstimate(_two_sided_tail(mu_z, sigma_z, alpha), 0.0, 0, "cdf")


def cdf_moment_partials(mu_z, sigma_z, alpha):
    """Partials of the two-sided tail in ``mu_z`` and ``sigma_z``."""
    if not sigma_z > 0:
        raise ContractError("sigma_z must be > 0")
    a = (-alpha - mu_z) / sigma_z
    b = (alpha - mu_z) / sigma_z
    pa, pb = norm_pdf(a), norm_pdf(b)
    return (pb - pa) / sigma_z, (b * pb - a * pa) / sigma_z


def cdf_omega_gradients(grad_h, omega: PerturbationParams, alpha: float):
    g = np.asarray(grad_h, dtype=float)
    mu_z, sigma_z = shift_moments(g, omega)
    ds_dmu, ds_dsig = cdf_moment_partials(mu_z, sigma_z, alpha)
    return ds_dmu * float(np.sum(g)), ds_dsig * float(np.linalg.norm(g))


def grad_phi_cdf(phi, data, omega: PerturbationParams, alpha: float, grad_h=None) -> np.ndarray:
    """Gradient in ``phi`` of the closed-form sensitivity, through ``grad_h``."""
    g = mean_pred_grad(phi, data) if grad_h is None else grad_h
    mu_z, sigma_z = shift_moments(g, omega)
    if sigma_z == 0.0:
        return np.zeros(len(phi))
    ds_dmu, ds_dsig = cdf_moment_partials(mu_z, sigma_z, alpha)
    direction = ds_dmu * omega.mu * np.ones_like(g) + ds_dsig * omega.sigma * g / np.linalg.norm(g)
    return hvp_mean_pred(phi, data, direction)


# --- Lipschitz machinery ---------------------------------------------------


def empirical_lipschitz(phi: SurrogateParams, box, probes: int, rng: SeededRng) -> LipschitzEstimate:
    """Largest observed slope of ``g(.; phi)`` inside ``box = (lo, hi)``.

    Combines random secant slopes with gradient norms at the probe points;
    the result can only under-estimate the true constant. Probe ``i`` does
    not depend on the total count, so more probes never lower the value.
    """
    if probes < 100:
        raise ContractError("need at least 100 probes")
    lo, hi = (np.asarray(b, dtype=float).reshape(-1) for b in box)
    d = lo.shape[0]
    P = rng.uniform(0.0, 1.0, (probes, 2 * d))
    A = lo + P[:, :d] * (hi - lo)
    B = lo + P[:, d:] * (hi - lo)
    dist = np.linalg.norm(A - B, axis=1)
    ok = dist > 0
    secant = np.abs(predict(phi, A) - predict(phi, B))[ok] / dist[ok]
    grad_norm = np.linalg.norm(input_grads(phi, A), axis=1)
    value = float(max(secant.max(initial=0.0), grad_norm.max(initial=0.0)))
    return LipschitzEstimate(value, probes)


@dataclass
class Lemma1Report:
    status: str  # "pass", "vacuous-pass" or "inconclusive"
    witnesses: int
    neighbours_checked: int
    violations: list

    @property
    def passed(self) -> bool:
        return self.status in ("pass", "vacuous-pass")


def lemma1_check(phi, gamma, data, alpha, L: LipschitzEstimate, grid) -> Lemma1Report:
    """Check that a large pointwise shift at a data point persists nearby.

    For every offline design ``x`` whose prediction moves by at least
    ``alpha`` under ``gamma``, every grid point within ``alpha / (4L)`` must
    move by at least ``alpha / 2``. A violation can only mean ``L`` was
    under-estimated, so it is reported as inconclusive rather than failed.
    """
    shifted = phi.replace(phi.flat + np.asarray(gamma, dtype=float))
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[1] != data.d:
        grid = grid.reshape(-1, data.d)
    move_data = predict(shifted, data.X) - predict(phi, data.X)
    wit = np.flatnonzero(np.abs(move_data) >= alpha)
    if wit.size == 0:
        return Lemma1Report("vacuous-pass", 0, 0, [])
    if not L.value > 0:
        return Lemma1Report("inconclusive", int(wit.size), 0, [("zero Lipschitz estimate", None, None)])
    move_grid = predict(shifted, grid) - predict(phi, grid)
    radius = alpha / (4.0 * L.value)
    violations = []
    checked = 0
    for i in wit:
        near = np.linalg.norm(grid - data.X[i], axis=1) <= radius
        checked += int(near.sum())
        bad = near & (np.abs(move_grid) < alpha / 2)
        for j in np.flatnonzero(bad):
            violations.append((data.X[i].copy(), grid[j].copy(), float(move_grid[j])))
    status = "pass" if not violations else "inconclusive"
    return Lemma1Report(status, int(wit.size), checked, violations)
