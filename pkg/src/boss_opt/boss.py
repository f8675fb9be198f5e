"""Sensitivity-regularized surrogate training.

Each iteration first pushes the perturbation parameters ``(mu, sigma)``
towards higher sensitivity, projects them back into their box, and then takes
one descent step on ``fit_loss + lambda * regularizer`` evaluated under the
updated perturbation.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .core import ContractError, OfflineDataset, SeededRng
from .sensitivity import (
    PerturbationParams,
    cdf_omega_gradients,
    cdf_sensitivity,
    fit_phi_net,
    grad_phi_cdf,
    grad_phi_upper_bound,
    label_batch,
    mc_sensitivity,
    omega_gradients,
    sample_batch,
    shift_moments,
    upper_bound_sensitivity,
    upper_bound_terms,
)
from .surrogate import (
    MlpSpec,
    SurrogateParams,
    gd_step,
    loss_and_grad,
    mean_pred_grad,
    minibatch_stream,
)

log = logging.getLogger(__name__)

MODES = ("boss", "boss2", "none", "l1", "l2")
DELTA_MODES = ("taylor", "exact")
PHI_GRAD_MODES = ("taylor-hvp", "exact")


@dataclass(frozen=True)
class BossConfig:
    alpha: float = 0.1
    lam: float = 1e-3
    m: int = 100
    tau: int = 50
    eta_omega: float = 1e-2
    eta_phi: float = 1e-3
    mu_init: float = 0.0
    sigma_init: float = 1e-3
    mu_lo: float = -1e-3
    mu_hi: float = 1e-3
    sigma_lo: float = 1e-5
    sigma_hi: float = 1e-2
    mode: str = "boss"
    delta_mode: str = "taylor"
    phi_grad_mode: str = "taylor-hvp"
    phi_epochs: int = 50
    phi_lr: float = 1e-2
    batch_size: Optional[int] = None
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractError("alpha must be > 0")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if self.m < 1 or self.tau < 1 or self.phi_epochs < 1:
            raise ContractError("m, tau and phi_epochs must be >= 1")
        if self.eta_phi < 0 or self.eta_omega < 0:
            raise ContractError("learning rates must be >= 0")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        if self.delta_mode not in DELTA_MODES:
            raise ContractError(f"delta_mode must be one of {DELTA_MODES}")
        if self.phi_grad_mode not in PHI_GRAD_MODES:
            raise ContractError(f"phi_grad_mode must be one of {PHI_GRAD_MODES}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        self.initial_omega()  # validates bounds and inits

    def initial_omega(self) -> PerturbationParams:
        return PerturbationParams(
            self.mu_init, self.sigma_init, self.mu_lo, self.mu_hi, self.sigma_lo, self.sigma_hi
        )

    def replace(self, **kw) -> "BossConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return BossConfig(**vals)


@dataclass(frozen=True)
class IterRecord:
    iter: int
    mu: float
    sigma: float
    s_mc: float
    s_plus: float
    fit_loss: float
    total_loss: float


TRACE_COLUMNS = ("iter", "mu", "sigma", "s_mc", "s_plus", "fit_loss", "total_loss")


@dataclass
class BossTrace:
    records: list = field(default_factory=list)
    params: list = field(default_factory=list)
    bound_violations: int = 0  # samples where the indicator exceeded its squared bound

    def __len__(self):
        return len(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([r.iter] + [repr(float(getattr(r, c))) for c in TRACE_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path) -> "BossTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        recs = [
            IterRecord(int(r["iter"]), *(float(r[c]) for c in TRACE_COLUMNS[1:])) for r in rows
        ]
        return cls(recs)


class BossDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def project_omega(omega: PerturbationParams) -> PerturbationParams:
    return project_values(omega.mu, omega.sigma, omega)


def project_values(mu, sigma, like: PerturbationParams) -> PerturbationParams:
    """Clamp raw ``(mu, sigma)`` into the box carried by ``like``."""
    return PerturbationParams(
        float(np.clip(mu, like.mu_lo, like.mu_hi)),
        float(np.clip(sigma, like.sigma_lo, like.sigma_hi)),
        like.mu_lo, like.mu_hi, like.sigma_lo, like.sigma_hi,
    )


def regularizer_value(phi, omega, data, cfg: BossConfig, batch=None, grad_h=None) -> float:
    """Value of the configured regularizer.

    ``boss`` needs a perturbation ``batch``; it is drawn from ``cfg.seed``
    when omitted.
    """
    if cfg.mode == "none":
        return 0.0
    if cfg.mode == "l1":
        return float(np.sum(np.abs(phi.flat)))
    if cfg.mode == "l2":
        return float(phi.flat @ phi.flat)
    if grad_h is None:
        grad_h = mean_pred_grad(phi, data)
    if cfg.mode == "boss2":
        return cdf_sensitivity(grad_h, omega, cfg.alpha).value
    if batch is None:
        batch = sample_batch(omega, cfg.m, len(phi), SeededRng(cfg.seed).child("regularizer"))
    return upper_bound_sensitivity(batch, grad_h, cfg.alpha, cfg.delta_mode, phi, data).value


def _regularizer_grad(phi, omega, batch, data, cfg, grad_h):
    if cfg.mode == "l1":
        return np.sign(phi.flat)
    if cfg.mode == "l2":
        return 2.0 * phi.flat
    if cfg.mode == "boss2":
        return grad_phi_cdf(phi, data, omega, cfg.alpha, grad_h)
    if cfg.mode == "boss":
        return grad_phi_upper_bound(phi, batch, cfg.alpha, data, cfg.phi_grad_mode, grad_h)
    return None


def ascend_omega(omega, batch, grad_h, phi, data, cfg: BossConfig, rng: SeededRng):
    """One projected ascent step on ``(mu, sigma)``; returns ``(omega, info)``."""
    info = {}
    if cfg.mode == "boss":
        lab = label_batch(batch, grad_h, cfg.alpha, cfg.delta_mode, phi, data)
        net = fit_phi_net(lab, cfg.phi_epochs, cfg.phi_lr, rng)
        d_mu, d_sigma = omega_gradients(net, lab)
        info.update(labelled=lab, phi_net=net)
    elif cfg.mode == "boss2":
        if shift_moments(grad_h, omega)[1] > 0:
            d_mu, d_sigma = cdf_omega_gradients(grad_h, omega, cfg.alpha)
        else:
            d_mu = d_sigma = 0.0
    else:
        return omega, info
    info.update(d_mu=d_mu, d_sigma=d_sigma)
    new = project_values(omega.mu + cfg.eta_omega * d_mu, omega.sigma + cfg.eta_omega * d_sigma, omega)
    return new, info


def boss_train(
    data: OfflineDataset,
    spec: MlpSpec,
    cfg: BossConfig,
    phi_init: SurrogateParams,
    keep_params: bool = False,
    callback: Optional[Callable[[dict], None]] = None,
):
    """Alternate perturbation ascent and regularized surrogate descent.

    Returns ``(phi, trace)``. The trace reports the Monte-Carlo sensitivity
    and its squared upper bound on the same batch, namely the base noise of
    the iteration re-expressed under the updated ``(mu, sigma)`` that the
    descent step uses. With ``keep_params`` the trace also stores the
    parameter vector at the start of every iteration. ``callback`` receives a
    dict of per-iteration intermediates.
    """
    if phi_init.spec != spec:
        raise ContractError("phi_init does not match spec")
    if spec.d != data.d:
        raise ContractError(f"spec input {spec.d} does not match data dimension {data.d}")
    rng = SeededRng(cfg.seed)
    batches = minibatch_stream(data.n, cfg.batch_size, rng.child("minibatch"))
    omega = cfg.initial_omega()
    flat = phi_init.flat.copy()
    velocity = None
    trace = BossTrace()
    P = len(phi_init)
    for t in range(cfg.tau):
        phi = SurrogateParams(flat, spec)
        if keep_params:
            trace.params.append(phi)
        batch = sample_batch(omega, cfg.m, P, rng.child("perturb", t))
        grad_h = mean_pred_grad(phi, data)
        new_omega, info = ascend_omega(omega, batch, grad_h, phi, data, cfg, rng.child("phi-net", t))

        fit_loss, g_fit = loss_and_grad(phi, data.subset(next(batches)))
        post = label_batch(batch.at(new_omega.mu, new_omega.sigma), grad_h, cfg.alpha, cfg.delta_mode, phi, data)
        trace.bound_violations += int(np.sum(post.kappa > upper_bound_terms(post.delta, cfg.alpha)))
        s_mc = mc_sensitivity(post).value
        s_plus = upper_bound_sensitivity(post, grad_h, cfg.alpha, cfg.delta_mode, phi, data).value

        g_reg = _regularizer_grad(phi, new_omega, post, data, cfg, grad_h)
        if cfg.mode == "boss":
            reg = s_plus
        else:
            reg = regularizer_value(phi, new_omega, data, cfg, grad_h=grad_h)
        grad = g_fit if g_reg is None else g_fit + cfg.lam * g_reg
        total = fit_loss + cfg.lam * reg

        rec = IterRecord(t + 1, new_omega.mu, new_omega.sigma, s_mc, s_plus, fit_loss, total)
        trace.records.append(rec)
        if callback is not None:
            callback(dict(t=t, phi=phi, batch=batch, grad_h=grad_h, omega=omega, new_omega=new_omega,
                          post=post, fit_loss=fit_loss, g_fit=g_fit, g_reg=g_reg, record=rec, **info))
        if not (np.isfinite(total) and np.all(np.isfinite(grad))):
            raise BossDiverged(f"non-finite objective at iteration {t + 1}", trace)
        flat, velocity = gd_step(flat, grad, cfg.eta_phi, velocity, cfg.momentum)
        omega = new_omega
    return SurrogateParams(flat, spec), trace


def lemma2_gap(trace: BossTrace):
    """``(mean, max)`` of ``|s_mc - s_plus|`` over the recorded iterations."""
    gap = np.abs(trace.column("s_mc") - trace.column("s_plus"))
    return float(gap.mean()), float(gap.max())


def recompute_trace(trace: BossTrace, data: OfflineDataset, cfg: BossConfig):
    """Rebuild every iteration's batch from the seed and recompute both estimates.

    Needs a trace recorded with ``keep_params=True``. Returns an ``(tau, 2)``
    array of ``(s_mc, s_plus)``.
    """
    if len(trace.params) != len(trace.records):
        raise ContractError("trace was recorded without parameter snapshots")
    rng = SeededRng(cfg.seed)
    out = []
    omega = cfg.initial_omega()
    for t, (phi, rec) in enumerate(zip(trace.params, trace.records)):
        batch = sample_batch(omega, cfg.m, len(phi), rng.child("perturb", t))
        grad_h = mean_pred_grad(phi, data)
        post = label_batch(batch.at(rec.mu, rec.sigma), grad_h, cfg.alpha, cfg.delta_mode, phi, data)
        out.append((
            mc_sensitivity(post).value,
            upper_bound_sensitivity(post, grad_h, cfg.alpha, cfg.delta_mode, phi, data).value,
        ))
        omega = project_values(rec.mu, rec.sigma, omega)
    return np.array(out)
