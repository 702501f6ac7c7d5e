import itertools

import numpy as np
import pytest

from fastslow.errors import SpecError
from fastslow.fast_process import (
    IidSpec, IntervalMapSpec, MarkovChainSpec, ObservableSpec, build_suspension, check_invariance,
    conditional_smooth, eta_chain, eta_path, exact_covariance, make_process, mixing_coefficient,
    phi_coefficient, rho_coefficient, roof_moments, sample_ensemble, sample_path, smoothed_value, theta,
)

from .conftest import K2_TRANSITION, K2_VALUES, k2_handle


def test_chain_validation_rejects_bad_rows():
    with pytest.raises(SpecError):
        MarkovChainSpec(np.array([[0.5, 0.4], [0.5, 0.5]]))


def test_chain_validation_rejects_periodic_chain():
    with pytest.raises(SpecError):
        MarkovChainSpec(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_chain_validation_rejects_reducible_chain():
    with pytest.raises(SpecError):
        MarkovChainSpec(np.array([[1.0, 0.0], [0.5, 0.5]]))


def test_k2_stationary_vector(k2_chain):
    np.testing.assert_allclose(k2_chain.stationary, [0.5, 0.5], atol=1e-15)


def test_k2_long_path_mean_is_zero(k2):
    path = sample_path(k2, 1_000_000)
    se = np.sqrt(3.0 / path.shape[0])
    assert abs(path.mean()) < 3 * se


def test_rademacher_lag_one_covariance_vanishes(coin):
    path = sample_path(coin, 1_000_000)[:, 0]
    cov = np.mean(path[:-1] * path[1:])
    assert abs(cov) < 3 / np.sqrt(path.size)


def test_rademacher_variance_is_one(coin):
    path = sample_path(coin, 1_000_000)[:, 0]
    # Var of x^2 is zero for +-1 values, so the sample variance is exact up to the mean term.
    assert abs(path.var() - 1.0) < 3 * np.sqrt(2.0 / path.size)


def test_doubling_halves_have_equal_histograms(doubling):
    path = sample_path(doubling, 1_000_000)[:, 0] + 0.5
    edges = np.linspace(0, 1, 11)
    a, _ = np.histogram(path[:500_000], edges)
    b, _ = np.histogram(path[500_000:], edges)
    se = np.sqrt(a + b)
    assert np.max(np.abs(a - b) / se) < 3 * 1.5


def test_same_seed_reproduces_path(k2):
    a = sample_path(k2, 4)
    b = sample_path(k2_handle(7), 4)
    np.testing.assert_array_equal(a, b)


def test_ensemble_members_independent_of_request_shape(k2):
    whole = sample_ensemble(k2, 300, paths=130)
    part = sample_ensemble(k2, 300, paths=10, first=100)
    np.testing.assert_array_equal(whole[100:110], part)


def test_ensemble_identical_across_thread_counts(doubling):
    a = sample_ensemble(doubling, 500, paths=200, threads=1)
    b = sample_ensemble(doubling, 500, paths=200, threads=8)
    np.testing.assert_array_equal(a, b)


def test_k2_lag_one_sample_covariance(k2):
    path = sample_path(k2, 1_000_000)[:, 0]
    prods = path[:-1] * path[1:]
    # Batch means give the s.e. of a dependent average.
    batches = prods[: 999_000].reshape(100, -1).mean(axis=1)
    se = batches.std(ddof=1) / 10
    assert abs(prods.mean() - 0.5) < 3 * se


def _matrix_power_covariance(P, g, lag):
    w, V = np.linalg.eig(P.T)
    pi = np.real(V[:, np.argmin(np.abs(w - 1))])
    pi = pi / pi.sum()
    Pn = np.linalg.matrix_power(P, lag)
    return sum(pi[s] * g[s] * g[t] * Pn[s, t] for s in range(len(g)) for t in range(len(g)))


@pytest.mark.parametrize("lag", [0, 1, 2, 5, 10])
def test_exact_covariance_matches_matrix_power_oracle(k2_chain, lag):
    value = exact_covariance(k2_chain, ObservableSpec(values=K2_VALUES), lag)
    assert value[0, 0] == pytest.approx(0.5 ** lag, abs=1e-14)
    oracle = _matrix_power_covariance(K2_TRANSITION, K2_VALUES[:, 0], lag)
    assert value[0, 0] == pytest.approx(oracle, abs=1e-14)


def test_exact_covariance_of_iid_rows_vanishes():
    spec = MarkovChainSpec(np.array([[0.3, 0.7], [0.3, 0.7]]))
    obs = ObservableSpec(values=np.array([[0.7], [-0.3]]))
    for lag in (1, 2, 7):
        assert abs(exact_covariance(spec, obs, lag)[0, 0]) < 1e-15


def test_exact_covariance_rejects_uncentered(k2_chain):
    with pytest.raises(SpecError):
        exact_covariance(k2_chain, ObservableSpec(values=np.array([[1.0], [0.0]])), 1)


@pytest.mark.parametrize("lag", range(11))
def test_exact_covariance_agrees_with_sampled(k2, k2_chain, lag):
    path = sample_path(k2, 1_000_000)[:, 0]
    prods = path[: path.size - lag] * path[lag:]
    batches = prods[: 100 * (prods.size // 100)].reshape(100, -1).mean(axis=1)
    se = batches.std(ddof=1) / 10 + 1e-12
    exact = exact_covariance(k2_chain, ObservableSpec(values=K2_VALUES), lag)[0, 0]
    assert abs(prods.mean() - exact) < 4 * se


def test_phi_coefficient_k2_one_step(k2_chain):
    assert phi_coefficient(k2_chain, 1) == pytest.approx(0.5, abs=1e-15)


def test_phi_coefficient_of_iid_rows_is_zero():
    spec = MarkovChainSpec(np.array([[0.3, 0.7], [0.3, 0.7]]))
    assert phi_coefficient(spec, 1) == pytest.approx(0.0, abs=1e-15)


def _cylinder_phi(P, pi, n, width):
    """Brute force sup |P(B | A) - P(B)| over cylinder events of the given width."""
    S = len(pi)
    worst = 0.0
    words = list(itertools.product(range(S), repeat=width))

    def prob(word):
        p = pi[word[0]]
        for a, b in zip(word, word[1:]):
            p *= P[a, b]
        return p

    Pn = np.linalg.matrix_power(P, n)
    # Past cylinders end in a state s; future cylinder events are unions of words.
    for past in words:
        last = past[-1]
        for mask in range(1, 2 ** len(words)):
            event = [w for i, w in enumerate(words) if mask >> i & 1]
            cond = sum(Pn[last, w[0]] * prob(w) / pi[w[0]] for w in event)
            marg = sum(prob(w) for w in event)
            worst = max(worst, abs(cond - marg))
    return worst


@pytest.mark.parametrize("n", [1, 2, 3])
def test_phi_bound_dominates_cylinder_enumeration(k2_chain, n):
    brute = _cylinder_phi(K2_TRANSITION, k2_chain.stationary, n, 2)
    bound = phi_coefficient(k2_chain, n)
    assert bound == pytest.approx(0.5 ** n, abs=1e-14)
    assert brute <= bound + 1e-14


def test_phi_is_non_increasing(k2_chain):
    values = [phi_coefficient(k2_chain, n) for n in range(1, 30)]
    assert all(b <= a + 1e-16 for a, b in zip(values, values[1:]))


def test_rho_coefficients(k2, coin, doubling):
    assert rho_coefficient(k2, 1) == 0.0
    assert rho_coefficient(coin, 4) == 0.0
    assert rho_coefficient(doubling, 10) == pytest.approx(2.0 ** -10)
    values = [rho_coefficient(doubling, m) for m in range(1, 20)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_rho_rejects_handle_without_symbols(k2):
    from dataclasses import replace
    with pytest.raises(SpecError):
        rho_coefficient(replace(k2, symbolic_access=False), 1)
    with pytest.raises(SpecError):
        conditional_smooth(replace(k2, symbolic_access=False), 1)


def test_conditional_smooth_is_identity_for_state_functions(k2, coin):
    np.testing.assert_array_equal(sample_path(conditional_smooth(k2, 2), 1000), sample_path(k2, 1000))
    np.testing.assert_array_equal(sample_path(conditional_smooth(coin, 1), 1000), sample_path(coin, 1000))


def test_conditional_smooth_doubling_cylinder_average(doubling):
    a = 5 / 8
    value = smoothed_value(doubling, np.array([a + 0.01]), 3)[0, 0]
    assert value == pytest.approx(a + 1 / 16 - 0.5, abs=1e-6)


def test_conditional_smooth_within_rho(doubling):
    m = 6
    raw = sample_path(doubling, 20_000)
    smooth = sample_path(conditional_smooth(doubling, m), 20_000)
    assert np.max(np.abs(raw - smooth)) <= rho_coefficient(doubling, m) + 1e-12


def test_gauss_map_smoothing_within_rho():
    spec = IntervalMapSpec("gauss", 1.0, 1.0)
    h = make_process(spec, ObservableSpec(function=lambda x: x, d=1), seed=2)
    for m in (2, 5):
        raw = sample_path(h, 5000)
        smooth = sample_path(conditional_smooth(h, m), 5000)
        assert np.max(np.abs(raw - smooth)) <= rho_coefficient(h, m) + 1e-12


def test_gauss_map_marginal_matches_invariant_measure():
    spec = IntervalMapSpec("gauss", 1.0, 1.0)
    h = make_process(spec, ObservableSpec(function=lambda x: x, d=1, centered=False), seed=4)
    x = sample_path(h, 200_000)[:, 0]
    edges = np.linspace(0, 1, 11)
    counts, _ = np.histogram(x, edges)
    probs = np.diff(np.log2(1 + edges))
    # Consecutive values are dependent; batch the histogram to get honest errors.
    batch = np.array([np.histogram(c, edges)[0] for c in x.reshape(20, -1)]) / (x.size / 20)
    se = batch.std(axis=0, ddof=1) / np.sqrt(20)
    assert np.max(np.abs(counts / x.size - probs) / se) < 4


@pytest.mark.parametrize("kind", ["doubling", "gauss"])
def test_interval_maps_preserve_their_measures(kind):
    assert check_invariance(IntervalMapSpec(kind, 1.0, 1.0)) < 3.5


def test_sample_values_within_bound(k2, doubling):
    for h in (k2, doubling):
        assert np.max(np.abs(sample_path(h, 10_000))) <= h.bound * np.sqrt(h.d) + 1e-12


def test_marginal_is_shift_invariant(k2):
    paths = sample_ensemble(k2, 40, paths=20_000)
    a, b = paths[:, 0, 0], paths[:, 37, 0]
    pa, pb = np.mean(a > 0), np.mean(b > 0)
    se = np.sqrt(0.25 * 2 / a.size)
    assert abs(pa - pb) < 3 * se


def test_mixing_coefficient_declared_for_gauss_map():
    h = make_process(IntervalMapSpec("gauss", 1.0, 1.0), ObservableSpec(function=lambda x: x, d=1))
    values = [mixing_coefficient(h, n) for n in range(1, 10)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_unit_roof_suspension(k2):
    susp = build_suspension(k2, lambda v: np.ones(v.shape[:-1]), 1.0)
    np.testing.assert_array_equal(eta_path(susp, 50), sample_ensemble(k2, 50))
    np.testing.assert_array_equal(theta(susp, 5)[0], np.arange(6.0))
    assert susp.mean_roof == 1.0


def test_k2_roof_suspension(k2):
    susp = build_suspension(k2, lambda v: 1 + 0.25 * v[..., 0], 4 / 3)
    inc = np.diff(theta(susp, 1000)[0])
    assert set(np.round(inc, 12)) <= {0.75, 1.25}
    assert susp.mean_roof == pytest.approx(1.0, abs=1e-15)
    mean_roof, second = roof_moments(susp)
    assert second[0, 0] == pytest.approx(0.9375 ** 2, abs=1e-14)
    spec, values = eta_chain(susp)
    assert abs(spec.stationary @ values[:, 0]) < 1e-15


def test_linear_suspension_trapezoid(k2):
    susp = build_suspension(k2, lambda v: np.ones(v.shape[:-1]), 1.0, mode="linear", center=False)
    eta = eta_path(susp, 100)[0, :, 0]
    xi = sample_ensemble(k2, 101)[0, :, 0]
    np.testing.assert_allclose(eta, 0.5 * (xi[:-1] + xi[1:]), atol=0)


def test_roof_outside_bounds_rejected(k2):
    with pytest.raises(SpecError):
        build_suspension(k2, lambda v: 1 + 0.9 * v[..., 0], 1.5)


def test_iid_gaussian_handle_has_no_finite_marginal(gaussian_iid):
    assert gaussian_iid.marginal() is None
    assert make_process(IidSpec("rademacher", d=2)).marginal()[0].shape == (4, 2)
