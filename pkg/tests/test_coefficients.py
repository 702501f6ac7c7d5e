import numpy as np
import pytest

from fastslow.coefficients import (
    cesaro_sigma, covariance_summary, diffusion_fields, identity_residual, psd_sqrt,
)
from fastslow.errors import SpecError
from fastslow.fast_process import (
    IidSpec, MarkovChainSpec, ObservableSpec, build_suspension, eta_chain, make_process,
    roof_moments, sample_path,
)
from fastslow.slow_motion import SlowModel, constant_model, diagonal_sin_model, two_plus_sin_model

from .conftest import K2_TRANSITION, K2_VALUES


def _power_sum_oracle(P, g, terms=200):
    """Long-run covariance and one-sided sum by summing matrix powers until they vanish."""
    w, V = np.linalg.eig(P.T)
    pi = np.real(V[:, np.argmin(np.abs(w - 1))])
    pi /= pi.sum()
    D = np.diag(pi)
    lags = [g.T @ D @ np.linalg.matrix_power(P, n) @ g for n in range(terms)]
    one_sided = sum(lags[1:])
    return lags[0] + one_sided + one_sided.T, one_sided.T, lags[0]


def test_k2_exact_summary(k2):
    s = covariance_summary(k2)
    sigma, hat, zero = _power_sum_oracle(K2_TRANSITION, K2_VALUES)
    assert s.sigma[0, 0] == pytest.approx(3.0, abs=1e-12)
    assert s.sigma_hat[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert s.zero_lag[0, 0] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(s.sigma, sigma, atol=1e-12)
    assert s.provenance["mode"] == "exact"
    assert identity_residual(s) <= 1e-12


def test_three_state_two_dim_chain_matches_power_sums():
    P = np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.4, 0.1, 0.5]])
    g = np.array([[1.0, 0.0], [-0.5, 1.0], [0.2, -2.0]])
    spec = MarkovChainSpec(P)
    h = make_process(spec, ObservableSpec(values=g), seed=1)
    s = covariance_summary(h)
    gc = g - spec.stationary @ g
    sigma, hat, zero = _power_sum_oracle(P, gc)
    np.testing.assert_allclose(s.sigma, sigma, atol=1e-12)
    np.testing.assert_allclose(s.sigma_hat, hat, atol=1e-12)
    assert identity_residual(s) < 1e-12
    assert np.linalg.eigvalsh(s.sigma).min() >= -1e-8


def test_iid_summaries(coin, gaussian_iid):
    for h in (coin, gaussian_iid):
        s = covariance_summary(h)
        assert s.sigma[0, 0] == pytest.approx(1.0, abs=1e-15)
        assert s.sigma_hat[0, 0] == 0.0
    scaled = make_process(IidSpec("gaussian", d=2, scale=2.0))
    np.testing.assert_allclose(covariance_summary(scaled).sigma, 4 * np.eye(2), atol=1e-15)


def test_estimated_summary_agrees_with_exact(k2):
    s = covariance_summary(sample_path(k2, 1_000_000), n_max=50, handle=k2)
    assert s.provenance["mode"] == "estimated"
    assert abs(s.sigma[0, 0] - 3.0) < 4 * s.se["sigma"][0, 0]
    assert abs(s.sigma_hat[0, 0] - 1.0) < 4 * s.se["sigma_hat"][0, 0]
    resid = identity_residual(s)
    assert resid < 4 * max(s.se["sigma"][0, 0], 1e-12)
    assert s.provenance["tail_bound"] > 0


def test_truncation_change_within_geometric_tail(k2):
    a = covariance_summary(k2, n_max=10)
    b = covariance_summary(k2, n_max=20)
    lam = 0.5
    tail = 2 * lam ** 10 / (1 - lam)
    truncated_a = a.lags[0] + 2 * a.lags[1:].sum(axis=0)
    truncated_b = b.lags[0] + 2 * b.lags[1:].sum(axis=0)
    assert abs(truncated_b - truncated_a)[0, 0] < tail
    assert a.provenance["tail_bound"] == pytest.approx(lam ** 11 / (1 - lam), rel=1e-9)


def test_short_path_rejected(k2):
    with pytest.raises(SpecError):
        covariance_summary(sample_path(k2, 500), n_max=50)


@pytest.mark.parametrize("k", [8, 32, 128])
def test_cesaro_average_agrees_with_series(k2, k):
    exact = covariance_summary(k2).sigma
    plain = cesaro_sigma(k2, k, richardson=False)
    rich = cesaro_sigma(k2, k)
    # The plain double average has an O(1/k) bias; the extrapolated one decays geometrically.
    assert abs(plain - exact)[0, 0] == pytest.approx(4 * (1 - 0.5 ** k) / k, rel=1e-9)
    assert abs(rich - exact)[0, 0] < 1e-2 * 0.5 ** (k / 4) + 1e-12


def test_psd_sqrt():
    m = np.array([[4.0, 1.0], [1.0, 3.0]])
    root = psd_sqrt(m)
    np.testing.assert_allclose(root @ root, m, atol=1e-12)
    with pytest.raises(SpecError):
        psd_sqrt(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_two_plus_sin_fields_at_origin(k2):
    f = diffusion_fields(two_plus_sin_model(), covariance_summary(k2))
    assert f.c(np.zeros(1))[0] == pytest.approx(2.0, abs=1e-12)
    assert f.a(np.zeros(1))[0, 0] == pytest.approx(12.0, abs=1e-12)
    x = np.linspace(-3, 3, 25)[:, None]
    np.testing.assert_allclose(f.a(x), f.sigma_field(x) @ f.sigma_field(x).transpose(0, 2, 1), atol=1e-8)


def test_analytic_and_finite_difference_gradients_agree(k2):
    analytic = two_plus_sin_model()
    numeric = SlowModel(1, analytic.Sigma, L=analytic.L)
    s = covariance_summary(k2)
    x = np.linspace(-5, 5, 100)[:, None]
    a = diffusion_fields(analytic, s).c(x)
    b = diffusion_fields(numeric, s).c(x)
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_b_bar_averages_over_marginal(k2):
    model = constant_model(1.0, b=lambda x, z: x * 0 + z ** 2 + z)
    f = diffusion_fields(model, covariance_summary(k2), marginal=k2.marginal())
    assert f.b_bar(np.zeros(1))[0] == pytest.approx(1.0)
    with pytest.raises(SpecError):
        diffusion_fields(model, covariance_summary(k2))


def test_continuous_correction_adds_half_eta_moment(k2):
    susp = build_suspension(k2, lambda v: 1 + 0.25 * v[..., 0], 4 / 3)
    summary = covariance_summary(eta_chain(susp))
    _, second = roof_moments(susp)
    model = two_plus_sin_model()
    disc = diffusion_fields(model, summary, "discrete")
    cont = diffusion_fields(model, summary, "continuous", eta_zero_lag=second)
    x = np.linspace(-2, 2, 9)[:, None]
    grad = model.gradient(x)[:, 0, 0, 0]
    sig = model.Sigma(x)[:, 0, 0]
    np.testing.assert_allclose(cont.c(x)[:, 0] - disc.c(x)[:, 0], 0.5 * grad * second[0, 0] * sig, atol=1e-12)
    with pytest.raises(SpecError):
        diffusion_fields(model, summary, "continuous")


def test_eta_summary_for_k2_roof(k2):
    susp = build_suspension(k2, lambda v: 1 + 0.25 * v[..., 0], 4 / 3)
    s = covariance_summary(eta_chain(susp))
    assert s.sigma[0, 0] == pytest.approx(0.9375 ** 2 * 3, abs=1e-12)


def test_two_dimensional_fields_are_consistent(k2):
    chain = MarkovChainSpec(np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.4, 0.1, 0.5]]))
    h = make_process(chain, ObservableSpec(values=np.array([[1.0, 0.0], [-0.5, 1.0], [0.2, -2.0]])))
    f = diffusion_fields(diagonal_sin_model(), covariance_summary(h))
    x = np.random.default_rng(0).uniform(-3, 3, (50, 2))
    np.testing.assert_allclose(f.a(x), f.sigma_field(x) @ f.sigma_field(x).transpose(0, 2, 1), atol=1e-8)


def test_summary_serializes(k2):
    d = covariance_summary(k2, n_max=3).to_dict()
    assert d["provenance"]["mode"] == "exact"
    assert len(d["lags"]) == 4
