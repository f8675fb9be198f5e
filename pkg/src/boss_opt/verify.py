"""Self-check suite: gradients against finite differences, estimator
equivalences and the bound/identity properties the training loop relies on.

Functions under test are looked up on their modules at call time, so a
patched implementation is what gets checked.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import boss as _boss
from . import sensitivity as _sens
from . import surrogate as _sur
from .core import OfflineDataset, SeededRng
from .evaluation import percentile_indices


@dataclass(frozen=True)
class Check:
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name:<34} measured {self.measured:<12.3e} tol {self.tolerance:.1e}  ({self.seconds:.2f}s)"


def _fd(f, x0, h=1e-5):
    x0 = np.asarray(x0, dtype=float)
    g = np.empty_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        g[i] = (f(x0 + e) - f(x0 - e)) / (2 * h)
    return g


def _rel(a, b):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def _random_net(sizes, seed, scale=0.6):
    spec = _sur.MlpSpec(tuple(sizes))
    return _sur.SurrogateParams(scale * np.random.default_rng(seed).standard_normal(spec.n_params), spec)


def _random_data(n, d, seed):
    rng = np.random.default_rng(seed)
    return OfflineDataset(rng.uniform(-1, 1, (n, d)), rng.standard_normal(n), -10.0, 10.0)


def _wide(mu, sigma):
    return _sens.PerturbationParams(mu, sigma, -10.0, 10.0, 1e-6, 10.0)


def check_surrogate_grads(probes=100):
    worst = [0.0, 0.0, 0.0]
    rng = np.random.default_rng(0)
    for k in range(probes):
        phi = _random_net((3, 5, 4, 1), 1000 + k)
        data = _random_data(6, 3, 2000 + k)
        _, g = _sur.loss_and_grad(phi, data)
        worst[0] = max(worst[0], _rel(g, _fd(lambda f: _sur.loss_and_grad(phi.replace(f), data)[0], phi.flat)))
        worst[1] = max(worst[1], _rel(_sur.mean_pred_grad(phi, data),
                                      _fd(lambda f: _sur.mean_pred(phi.replace(f), data), phi.flat)))
        x = rng.uniform(-1, 1, 3)
        worst[2] = max(worst[2], _rel(_sur.input_grad(phi, x), _fd(lambda z: _sur.mlp_forward(phi, z), x)))
    return {"loss_and_grad vs FD": worst[0], "mean_pred_grad vs FD": worst[1], "input_grad vs FD": worst[2]}


def check_omega_grads(trials=4):
    """Membership-classifier ascent directions vs frozen-noise FD."""
    wm = ws = 0.0
    for s in range(trials):
        rng = np.random.default_rng(s)
        grad_h = rng.standard_normal(12)
        mu, sigma = 0.05, 0.2
        b = _sens.sample_batch(_wide(mu, sigma), 80, 12, SeededRng(s))
        lab = _sens.label_batch(b, grad_h, 0.4)
        net = _sens.fit_phi_net(lab, 20, 0.3, SeededRng(s))
        d_mu, d_sig = _sens.omega_gradients(net, lab)
        f = lambda m_, s_: float(np.mean(net(lab.at(m_, s_).gamma)))
        h = 1e-6
        wm = max(wm, _rel(d_mu, (f(mu + h, sigma) - f(mu - h, sigma)) / (2 * h)))
        ws = max(ws, _rel(d_sig, (f(mu, sigma + h) - f(mu, sigma - h)) / (2 * h)))
    return {"omega mu-gradient vs FD": wm, "omega sigma-gradient vs FD": ws}


def check_cdf_omega_grads():
    g = np.array([0.7, -0.1, 0.4, 0.9])
    worst = 0.0
    for mu, sigma, alpha in [(0.1, 0.5, 0.3), (-0.3, 0.2, 0.1), (0.0, 1.0, 1.5), (0.02, 0.05, 0.08)]:
        d_mu, d_sig = _sens.cdf_omega_gradients(g, _wide(mu, sigma), alpha)
        f = lambda m_, s_: _sens.cdf_sensitivity(g, _wide(m_, s_), alpha).value
        h = 1e-6
        worst = max(worst, _rel(d_mu, (f(mu + h, sigma) - f(mu - h, sigma)) / (2 * h)),
                    _rel(d_sig, (f(mu, sigma + h) - f(mu, sigma - h)) / (2 * h)))
    return worst


def check_hvp(trials=3):
    worst = 0.0
    for s in range(trials):
        phi = _sur.init_params(_sur.MlpSpec((2, 4, 1)), SeededRng(3))
        data = _random_data(25, 2, 10 + s)
        v = np.random.default_rng(s).standard_normal(len(phi))
        worst = max(worst, _rel(_sur.hvp_mean_pred(phi, data, v, "fd"), _sur.hvp_mean_pred(phi, data, v, "exact-small")))
    return worst


def _phi_setup(seed):
    phi = _random_net((2, 3, 1), seed, 0.8)
    data = _random_data(15, 2, seed + 50)
    b = _sens.sample_batch(_wide(0.0, 0.05), 30, len(phi), SeededRng(seed))
    return phi, data, b


def check_phi_grads(trials=3):
    alpha = 0.05
    out = {"upper-bound phi-grad exact vs FD": 0.0, "upper-bound phi-grad taylor vs FD": 0.0,
           "closed-form phi-grad vs FD": 0.0}
    for s in range(trials):
        phi, data, b = _phi_setup(s)
        f = lambda fl: _sens.upper_bound_sensitivity(b, None, alpha, "exact", phi.replace(fl), data).value
        g = _sens.grad_phi_upper_bound(phi, b, alpha, data, "exact")
        out["upper-bound phi-grad exact vs FD"] = max(out["upper-bound phi-grad exact vs FD"], _rel(g, _fd(f, phi.flat, 1e-6)))

        def ft(fl):
            p = phi.replace(fl)
            return _sens.upper_bound_sensitivity(b, _sur.mean_pred_grad(p, data), alpha).value

        g = _sens.grad_phi_upper_bound(phi, b, alpha, data, "taylor-hvp")
        out["upper-bound phi-grad taylor vs FD"] = max(out["upper-bound phi-grad taylor vs FD"], _rel(g, _fd(ft, phi.flat, 1e-6)))
        om = _wide(0.01, 0.05)
        fc = lambda fl: _sens.cdf_sensitivity(_sur.mean_pred_grad(phi.replace(fl), data), om, alpha).value
        g = _sens.grad_phi_cdf(phi, data, om, alpha)
        out["closed-form phi-grad vs FD"] = max(out["closed-form phi-grad vs FD"], _rel(g, _fd(fc, phi.flat, 1e-6)))
    return out


def check_mc_vs_cdf(settings=20, m=100_000):
    """Worst ``|mc - cdf| / max(0.01, 3 stderr)`` on a linear shift."""
    rng = np.random.default_rng(7)
    grad_h = rng.standard_normal(30)
    worst = 0.0
    for k in range(settings):
        om = _wide(float(rng.uniform(-0.02, 0.02)), float(rng.uniform(0.01, 0.1)))
        alpha = float(rng.uniform(0.05, 0.5))
        lab = _sens.label_batch(_sens.sample_batch(om, m, 30, SeededRng(100 + k)), grad_h, alpha)
        mc = _sens.mc_sensitivity(lab)
        worst = max(worst, abs(mc.value - _sens.cdf_sensitivity(grad_h, om, alpha).value) / max(0.01, 3 * mc.stderr))
    return worst


def check_lemma2(pairs=10_000):
    """Count of samples where the indicator exceeds its squared bound."""
    rng = np.random.default_rng(11)
    A = np.abs(rng.standard_cauchy(pairs))
    alpha = rng.uniform(1e-4, 5, pairs)
    return int(np.sum((A >= alpha) > _sens.upper_bound_terms(A, alpha)))


def check_lambda_zero():
    """Largest parameter difference between unregularized boss training and plain training."""
    spec = _sur.MlpSpec((3, 6, 1))
    data = _random_data(32, 3, 0)
    ref = _sur.train_surrogate(data, spec, 3, 0.05, 8, SeededRng(11))
    phi0 = _sur.init_params(spec, SeededRng(11).child("init"))
    cfg = _boss.BossConfig(lam=0.0, tau=12, eta_phi=0.05, batch_size=8, seed=11)
    phi, _ = _boss.boss_train(data, spec, cfg, phi0)
    return float(np.max(np.abs(phi.flat - ref.flat)))


def _timed(fn, *a):
    t0 = time.perf_counter()
    v = fn(*a)
    return v, time.perf_counter() - t0


def run_checks(quick: bool = False):
    """Run every check; returns a list of :class:`Check`."""
    out = []

    def add(name, value, tol, dt):
        ok = value <= tol and not math.isnan(value)
        out.append(Check(name, float(value), tol, bool(ok), dt))

    vals, dt = _timed(check_surrogate_grads, 20 if quick else 100)
    for k, v in vals.items():
        add(k, v, 1e-4, dt / 3)
    vals, dt = _timed(check_omega_grads, 2 if quick else 4)
    for k, v in vals.items():
        add(k, v, 1e-4, dt / 2)
    v, dt = _timed(check_cdf_omega_grads)
    add("closed-form omega-gradients vs FD", v, 1e-6, dt)
    v, dt = _timed(check_hvp)
    add("hvp fd vs exact-small", v, 1e-3, dt)
    vals, dt = _timed(check_phi_grads, 1 if quick else 3)
    for k, v in vals.items():
        add(k, v, 1e-3, dt / 3)
    v, dt = _timed(check_mc_vs_cdf, 5 if quick else 20, 20_000 if quick else 100_000)
    add("mc vs closed form (ratio to band)", v, 1.0, dt)
    v, dt = _timed(check_lemma2)
    add("bound dominance violations", v, 0, dt)
    v, dt = _timed(check_lambda_zero)
    add("lambda=0 matches plain training", v, 0.0, dt)
    idx = percentile_indices(128)
    add("percentile indices for K=128", float(idx != (63, 95, 127)), 0.0, 0.0)
    return out
