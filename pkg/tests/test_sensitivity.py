import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boss_opt.core import ContractError, OfflineDataset, SeededRng
from boss_opt.sensitivity import (
    LipschitzEstimate,
    PerturbationBatch,
    PerturbationParams,
    cdf_omega_gradients,
    cdf_sensitivity,
    delta_exact,
    delta_taylor,
    empirical_lipschitz,
    fit_phi_net,
    grad_phi_cdf,
    grad_phi_upper_bound,
    label_batch,
    lemma1_check,
    mc_sensitivity,
    omega_gradients,
    phi_net_sensitivity,
    sample_batch,
    signed_shifts,
    upper_bound_sensitivity,
    upper_bound_terms,
)
from boss_opt.surrogate import MlpSpec, mean_pred_grad
from conftest import linear_params, random_dataset, random_params
from oracles import central_diff, norm_cdf, rel_err


def wide_omega(mu, sigma):
    return PerturbationParams(mu, sigma, -10.0, 10.0, 1e-6, 10.0)


def test_omega_bounds_validated():
    PerturbationParams(0.0, 1e-3)
    with pytest.raises(ContractError):
        PerturbationParams(0.0, 0.0)
    with pytest.raises(ContractError):
        PerturbationParams(2e-3, 1e-3)
    with pytest.raises(ContractError):
        PerturbationParams(0.0, 1e-3, sigma_lo=0.0)


def test_sample_batch_shape_and_reparam():
    om = wide_omega(0.3, 2.0)
    b = sample_batch(om, 50, 7, SeededRng(1))
    assert b.gamma.shape == (50, 7)
    np.testing.assert_array_equal(b.gamma, 0.3 + 2.0 * b.eps)
    np.testing.assert_array_equal(b.at(0.1, 0.5).gamma, 0.1 + 0.5 * b.eps)
    with pytest.raises(ContractError):
        sample_batch(om, 0, 7, SeededRng(1))


def test_sample_batch_moments():
    b = sample_batch(wide_omega(0.5, 0.2), 20000, 5, SeededRng(2))
    assert abs(b.gamma.mean() - 0.5) < 0.01
    assert abs(b.gamma.std() - 0.2) < 0.005


def test_kappa_is_strict_at_threshold():
    grad_h = np.array([1.0, 1.0])
    batch = PerturbationBatch(np.zeros((3, 2)), np.array([[0.25, 0.25], [0.3, 0.0], [0.1, 0.0]]))
    lab = label_batch(batch, grad_h, 0.5, "taylor")
    np.testing.assert_array_equal(lab.kappa, [0.0, 0.0, 0.0])
    lab = label_batch(batch, grad_h, 0.3, "taylor")
    np.testing.assert_array_equal(lab.kappa, [1.0, 0.0, 0.0])


def test_delta_linear_surrogate_taylor_is_exact():
    data = random_dataset(10, 3, 0)
    phi = linear_params([0.5, -0.3, 1.1], 0.2)
    g = mean_pred_grad(phi, data)
    gam = np.random.default_rng(0).normal(size=(5, 4))
    exact = [delta_exact(phi, row, data) for row in gam]
    np.testing.assert_allclose(delta_taylor(g, gam), exact, rtol=1e-10, atol=1e-14)


def test_delta_zero_for_zero_perturbation(small_net, small_data):
    assert delta_exact(small_net, np.zeros(len(small_net)), small_data) == 0.0
    assert delta_taylor(mean_pred_grad(small_net, small_data), np.zeros(len(small_net))) == 0.0


def test_taylor_error_is_second_order(small_net, small_data):
    g = mean_pred_grad(small_net, small_data)
    v = np.random.default_rng(3).standard_normal(len(small_net))
    errs = [abs(signed_shifts(s * v, g, "exact", small_net, small_data)[0] - s * v @ g) for s in (1e-2, 5e-3)]
    assert 3.0 < errs[0] / errs[1] < 5.0


@settings(max_examples=200)
@given(A=st.floats(0, 1e3), alpha=st.floats(1e-6, 1e3))
def test_lemma2_per_sample(A, alpha):
    ind = 1.0 if A >= alpha else 0.0
    assert ind <= upper_bound_terms(A, alpha)


def test_lemma2_bulk_random_pairs():
    rng = np.random.default_rng(0)
    A = np.abs(rng.standard_cauchy(10**4))
    alpha = rng.uniform(1e-4, 5, 10**4)
    assert np.all((A >= alpha) <= upper_bound_terms(A, alpha))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), alpha=st.floats(1e-3, 1.0), sigma=st.floats(1e-3, 1.0))
def test_batch_bound_dominates_mc(seed, alpha, sigma):
    grad_h = np.random.default_rng(seed).standard_normal(6)
    b = sample_batch(wide_omega(0.0, sigma), 64, 6, SeededRng(seed))
    lab = label_batch(b, grad_h, alpha)
    assert mc_sensitivity(lab).value <= upper_bound_sensitivity(b, grad_h, alpha).value


def test_cdf_matches_independent_oracle():
    g = np.array([0.3, -0.4, 1.2])  # sum 1.1, norm 1.3
    om = wide_omega(0.2, 0.5)
    mu_z, s_z = 0.2 * 1.1, 0.5 * 1.3
    alpha = 0.4
    ref = norm_cdf((-alpha - mu_z) / s_z) + 1 - norm_cdf((alpha - mu_z) / s_z)
    assert cdf_sensitivity(g, om, alpha).value == pytest.approx(ref, abs=1e-14)


def test_cdf_limits():
    g = np.ones(4)
    assert cdf_sensitivity(g, wide_omega(0.0, 1e-6), 1.0).value == 0.0
    assert cdf_sensitivity(g, wide_omega(0.0, 10.0), 1e-6).value == pytest.approx(1.0, abs=1e-6)
    assert cdf_sensitivity(np.zeros(4), wide_omega(1.0, 1.0), 0.1).value == 0.0


@given(mu=st.floats(-2, 2), sigma=st.floats(0.01, 3), alpha=st.floats(0.01, 3))
def test_cdf_is_probability_and_even_in_mu(mu, sigma, alpha):
    g = np.array([0.5, 1.0, -0.2])
    s = cdf_sensitivity(g, wide_omega(mu, sigma), alpha).value
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(cdf_sensitivity(g, wide_omega(-mu, sigma), alpha).value, abs=1e-12)


def test_cdf_monotone_in_alpha():
    g = np.array([0.5, 1.0, -0.2])
    om = wide_omega(0.1, 0.7)
    vals = [cdf_sensitivity(g, om, a).value for a in np.linspace(0.01, 3, 40)]
    assert np.all(np.diff(vals) <= 0)


def test_mc_matches_cdf_linear_shift():
    g = np.random.default_rng(4).standard_normal(10)
    om = wide_omega(0.05, 0.3)
    b = label_batch(sample_batch(om, 10**5, 10, SeededRng(5)), g, 0.5)
    mc = mc_sensitivity(b)
    assert abs(mc.value - cdf_sensitivity(g, om, 0.5).value) <= max(0.01, 3 * mc.stderr)


def test_cdf_omega_gradients_fd():
    g = np.array([0.7, -0.1, 0.4, 0.9])
    for mu, sigma, alpha in [(0.1, 0.5, 0.3), (-0.3, 0.2, 0.1), (0.0, 1.0, 1.5)]:
        d_mu, d_sig = cdf_omega_gradients(g, wide_omega(mu, sigma), alpha)
        h = 1e-6
        f = lambda m_, s_: cdf_sensitivity(g, wide_omega(m_, s_), alpha).value
        assert rel_err(d_mu, (f(mu + h, sigma) - f(mu - h, sigma)) / (2 * h)) <= 1e-6
        assert rel_err(d_sig, (f(mu, sigma + h) - f(mu, sigma - h)) / (2 * h)) <= 1e-6


def _labelled(seed, m=80, dim=12, alpha=0.4):
    rng = np.random.default_rng(seed)
    grad_h = rng.standard_normal(dim)
    b = sample_batch(wide_omega(0.05, 0.2), m, dim, SeededRng(seed))
    return label_batch(b, grad_h, alpha), grad_h


def test_phi_net_gram_and_direct_agree():
    lab, _ = _labelled(0)
    a = fit_phi_net(lab, 30, 0.1, SeededRng(1), gram=True)
    b = fit_phi_net(lab, 30, 0.1, SeededRng(1), gram=False)
    np.testing.assert_allclose(a(lab.gamma), b(lab.gamma), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a.W1, b.W1, rtol=1e-9, atol=1e-12)


def test_phi_net_improves_likelihood():
    lab, _ = _labelled(1)
    short = fit_phi_net(lab, 1, 0.5, SeededRng(2))
    long = fit_phi_net(lab, 200, 0.5, SeededRng(2))
    assert long.log_likelihood > short.log_likelihood
    assert 0 <= phi_net_sensitivity(long, lab).value <= 1


def test_phi_net_constant_labels_drift_to_label():
    lab, _ = _labelled(2, alpha=1e6)
    assert not lab.kappa.any()
    net = fit_phi_net(lab, 200, 0.5, SeededRng(0))
    assert phi_net_sensitivity(net, lab).value < 0.5


def test_phi_net_input_grad_fd():
    lab, _ = _labelled(3)
    net = fit_phi_net(lab, 20, 0.3, SeededRng(0))
    g0 = lab.gamma[4]
    fd = central_diff(lambda z: net(z)[0], g0, 1e-6)
    assert rel_err(net.input_grad(g0)[0], fd) <= 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_omega_gradients_frozen_eps_fd(seed):
    lab, _ = _labelled(seed)
    net = fit_phi_net(lab, 20, 0.3, SeededRng(seed))
    mu, sigma = 0.05, 0.2
    d_mu, d_sig = omega_gradients(net, lab)
    f = lambda m_, s_: float(np.mean(net(lab.at(m_, s_).gamma)))
    h = 1e-6
    assert rel_err(d_mu, (f(mu + h, sigma) - f(mu - h, sigma)) / (2 * h)) <= 1e-4
    assert rel_err(d_sig, (f(mu, sigma + h) - f(mu, sigma - h)) / (2 * h)) <= 1e-4


def _phi_setup(seed):
    spec = MlpSpec((2, 3, 1))
    phi = random_params(spec, seed, 0.8)
    data = random_dataset(15, 2, seed + 50)
    b = sample_batch(wide_omega(0.0, 0.05), 30, len(phi), SeededRng(seed))
    return phi, data, b


@pytest.mark.parametrize("seed", range(3))
def test_grad_phi_upper_bound_exact_fd(seed):
    phi, data, b = _phi_setup(seed)
    alpha = 0.05
    g = grad_phi_upper_bound(phi, b, alpha, data, "exact")
    f = lambda fl: upper_bound_sensitivity(b, None, alpha, "exact", phi.replace(fl), data).value
    assert np.any(g != 0)
    assert rel_err(g, central_diff(f, phi.flat, 1e-6)) <= 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_grad_phi_upper_bound_taylor_fd(seed):
    phi, data, b = _phi_setup(seed)
    alpha = 0.05

    def f(fl):
        p = phi.replace(fl)
        return upper_bound_sensitivity(b, mean_pred_grad(p, data), alpha).value

    g = grad_phi_upper_bound(phi, b, alpha, data, "taylor-hvp")
    assert rel_err(g, central_diff(f, phi.flat, 1e-6)) <= 1e-3


def test_grad_phi_upper_bound_saturated_is_zero():
    phi, data, b = _phi_setup(0)
    assert not np.any(grad_phi_upper_bound(phi, b, 1e-12, data, "taylor-hvp"))
    assert not np.any(grad_phi_upper_bound(phi, b, 1e-12, data, "exact"))


@pytest.mark.parametrize("seed", range(3))
def test_grad_phi_cdf_fd(seed):
    phi, data, _ = _phi_setup(seed)
    om = wide_omega(0.01, 0.05)
    alpha = 0.05
    f = lambda fl: cdf_sensitivity(mean_pred_grad(phi.replace(fl), data), om, alpha).value
    g = grad_phi_cdf(phi, data, om, alpha)
    assert rel_err(g, central_diff(f, phi.flat, 1e-6)) <= 1e-3


def test_lipschitz_linear_exact_and_monotone():
    w = np.array([3.0, -4.0])
    phi = linear_params(w)
    box = (np.zeros(2), np.ones(2))
    est = empirical_lipschitz(phi, box, 100, SeededRng(0))
    assert est.value == pytest.approx(5.0, rel=1e-12)
    with pytest.raises(ContractError):
        empirical_lipschitz(phi, box, 99, SeededRng(0))


def test_lipschitz_more_probes_never_lower(small_net):
    box = (-np.ones(3), np.ones(3))
    vals = [empirical_lipschitz(small_net, box, n, SeededRng(1)).value for n in (100, 200, 400)]
    assert vals[0] <= vals[1] <= vals[2]


def test_lemma1_vacuous_and_pass():
    phi = linear_params([1.0], 0.0)
    data = OfflineDataset([[0.2], [0.5]], [0.0, 0.0], -1, 1)
    grid = np.linspace(-1, 1, 2001)[:, None]
    L = LipschitzEstimate(2.0, 100)
    assert lemma1_check(phi, np.zeros(2), data, 0.1, L, grid).status == "vacuous-pass"
    # bias shift of 0.3 moves every prediction by 0.3
    rep = lemma1_check(phi, np.array([0.0, 0.3]), data, 0.1, L, grid)
    assert rep.status == "pass" and rep.witnesses == 2 and rep.neighbours_checked > 0


def test_lemma1_underestimated_L_is_inconclusive():
    # slope perturbation makes the shift x * 1.0: it vanishes near x = 0
    phi = linear_params([0.0], 0.0)
    data = OfflineDataset([[0.15]], [0.0], -1, 1)
    grid = np.linspace(-1, 1, 2001)[:, None]
    rep = lemma1_check(phi, np.array([1.0, 0.0]), data, 0.1, LipschitzEstimate(1e-3, 100), grid)
    assert rep.status == "inconclusive" and not rep.passed and rep.violations


# --- worked examples ---------------------------------------------------------


def test_sampling_examples():
    b = sample_batch(PerturbationParams(0.0, 1e-5), 10**4, 1, SeededRng(0))
    assert np.max(np.abs(b.gamma)) <= 6e-5
    b = sample_batch(PerturbationParams(0.001, 0.01), 10**5, 4, SeededRng(1))
    assert np.all(np.abs(b.gamma.mean(axis=0) - 0.001) <= 1e-4)
    with pytest.raises(ContractError):
        PerturbationParams(1.0, 0.0, -10, 10)


def test_taylor_and_label_examples():
    assert delta_taylor(np.array([1.0, 2.0]), np.array([3.0, -1.0])) == 1.0
    assert delta_taylor(np.array([1.0, 2.0]), np.array([2.0, -1.0])) == 0.0
    batch = PerturbationBatch(np.zeros((2, 2)), np.array([[0.15, 0.0], [0.0, 0.0]]))
    lab = label_batch(batch, np.array([1.0, 0.0]), 0.1)
    np.testing.assert_array_equal(lab.kappa, [1.0, 0.0])
    assert not label_batch(batch, np.array([1.0, 0.0]), 1e18).kappa.any()


def test_delta_exact_matches_pointwise_average(small_net, small_data):
    gam = 0.05 * np.random.default_rng(2).standard_normal(len(small_net))
    shifted = small_net.replace(small_net.flat + gam)
    from oracles import scalar_mlp

    ref = np.mean([scalar_mlp(shifted.flat, (3, 5, 4, 1), x) - scalar_mlp(small_net.flat, (3, 5, 4, 1), x)
                   for x in small_data.X])
    assert abs(delta_exact(small_net, gam, small_data) - abs(ref)) <= 1e-9


def test_mc_all_zero_all_one():
    b = PerturbationBatch(np.zeros((3, 1)), np.zeros((3, 1)))
    assert mc_sensitivity(label_batch(b, np.ones(1), 0.1)).value == 0.0
    b = PerturbationBatch(np.zeros((3, 1)), np.ones((3, 1)))
    assert mc_sensitivity(label_batch(b, np.ones(1), 0.1)).value == 1.0


def test_phi_net_constant_and_separable_labels():
    b = sample_batch(wide_omega(0.0, 1.0), 200, 1, SeededRng(0))
    ones = label_batch(b, np.ones(1), 1e-12)
    ones = PerturbationBatch(b.eps, b.gamma, np.ones(200), ones.delta)
    zeros = PerturbationBatch(b.eps, b.gamma, np.zeros(200), ones.delta)
    assert phi_net_sensitivity(fit_phi_net(ones, 500, 0.5, SeededRng(1)), ones).value >= 0.9
    assert phi_net_sensitivity(fit_phi_net(zeros, 500, 0.5, SeededRng(1)), zeros).value <= 0.1
    sep = PerturbationBatch(b.eps, b.gamma, (b.gamma[:, 0] > 0).astype(float))
    net = fit_phi_net(sep, 500, 0.5, SeededRng(2))
    acc = np.mean((net(sep.gamma) > 0.5) == (sep.kappa == 1))
    assert acc >= 0.95


def test_omega_gradients_zero_for_constant_classifier():
    lab, _ = _labelled(5)
    net = fit_phi_net(lab, 5, 0.1, SeededRng(0))
    from dataclasses import replace

    flat = replace(net, w2=np.zeros(2))
    assert omega_gradients(flat, lab) == (0.0, 0.0)


def test_upper_bound_examples():
    b = PerturbationBatch(np.zeros((1, 1)), np.array([[0.05]]))
    assert upper_bound_sensitivity(b, np.ones(1), 0.1).value == pytest.approx(0.25, abs=1e-15)
    b = PerturbationBatch(np.zeros((4, 1)), np.zeros((4, 1)))
    assert upper_bound_sensitivity(b, np.ones(1), 0.1).value == 0.0


def test_upper_bound_phi_grad_linear_surrogate_is_zero():
    data = random_dataset(10, 2, 1)
    phi = linear_params([1.0, -2.0], 0.5)
    b = sample_batch(wide_omega(0.0, 0.05), 20, 3, SeededRng(0))
    assert np.allclose(grad_phi_upper_bound(phi, b, 0.1, data, "taylor-hvp"), 0.0, atol=1e-9)


def test_cdf_examples():
    # mu_z = 0, sigma_z = 1, alpha = 1: grad_h = (1,), sigma = 1
    v = cdf_sensitivity(np.array([1.0]), wide_omega(0.0, 1.0), 1.0).value
    assert v == pytest.approx(2 * (1 - norm_cdf(1.0)), abs=1e-12)
    assert v == pytest.approx(0.31731, abs=1e-5)
    d_mu, _ = cdf_omega_gradients(np.array([1.0, -1.0]), wide_omega(0.5, 1.0), 0.3)
    assert d_mu == 0.0  # sum(grad_h) = 0 puts mu_z at 0 for every mu
    from boss_opt.sensitivity import cdf_moment_partials

    assert cdf_moment_partials(0.0, 1.0, 0.7)[0] == 0.0
    big = cdf_moment_partials(0.1, 1.0, 60.0)
    assert abs(big[0]) < 1e-300 and abs(big[1]) < 1e-300


def test_lipschitz_constant_net_is_zero():
    spec = MlpSpec((2, 3, 1))
    from boss_opt.surrogate import SurrogateParams

    phi = SurrogateParams(np.zeros(spec.n_params), spec)
    assert empirical_lipschitz(phi, (np.zeros(2), np.ones(2)), 100, SeededRng(0)).value == 0.0


def test_lemma1_one_dim_tanh_net():
    spec = MlpSpec((1, 8, 1))
    phi = random_params(spec, 4, 1.0)
    X = np.linspace(-2, 2, 40)[:, None]
    data = OfflineDataset(X, np.zeros(40), -1, 1)
    grid = np.linspace(-2, 2, 2000)[:, None]
    L0 = empirical_lipschitz(phi, (np.array([-2.0]), np.array([2.0])), 1000, SeededRng(0))
    L = LipschitzEstimate(2 * L0.value, L0.probe_count)
    rng = SeededRng(9)
    passed = tried = 0
    k = 0
    while tried < 100:
        gam = 0.1 * rng.child(k).normal(len(phi))
        k += 1
        rep = lemma1_check(phi, gam, data, 0.1, L, grid)
        if rep.witnesses == 0:
            continue
        tried += 1
        passed += rep.passed
    assert passed == 100
