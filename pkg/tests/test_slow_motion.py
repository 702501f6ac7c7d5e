from dataclasses import replace

import mpmath
import numpy as np
import pytest

from fastslow.errors import NumericalAbort, SpecError
from fastslow.fast_process import (
    IidSpec, MarkovChainSpec, ObservableSpec, build_suspension, make_process, rho_coefficient,
    sample_ensemble,
)
from fastslow.slow_motion import (
    Path, SlowModel, affine_model, build_transform, check_model, constant_model, curl_residual,
    diagonal_sin_model, integrate_continuous, iterate_discrete, iterate_transformed,
    piece_gap_bound, model_from_registry, steps_for, taylor_remainder_constant, transform_constants,
    transform_gap, two_plus_sin_model,
)

from .conftest import k2_handle


def _zero_process():
    chain = MarkovChainSpec(np.array([[0.5, 0.5], [0.5, 0.5]]))
    return make_process(chain, ObservableSpec(values=np.array([[1.0], [1.0]])), seed=2)


def _unit_roof(h):
    return build_suspension(h, lambda v: np.ones(v.shape[:-1]), 1.0)


def test_steps_for_tolerates_binary_rounding():
    assert steps_for(0.3, 10) == 3
    assert steps_for(1.0, 2 ** 14) == 2 ** 14
    assert steps_for(1.0 / 7, 7) == 1


def test_path_validation_and_lookup():
    p = Path(np.array([0.0, 0.5, 1.0]), np.array([[[1.0], [2.0], [3.0]]]))
    np.testing.assert_array_equal(p.at([0.0, 0.49, 0.5, 0.99, 1.0])[0, :, 0], [1, 1, 2, 2, 3])
    assert p.terminal[0, 0] == 3.0
    with pytest.raises(SpecError):
        Path(np.array([0.1, 1.0]), np.zeros((1, 2, 1)))
    with pytest.raises(SpecError):
        Path(np.array([0.0, 0.0]), np.zeros((1, 2, 1)))


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_single_step_matches_hand_iteration_bitwise(seed):
    h = k2_handle(seed)
    model = two_plus_sin_model(b=lambda x, z: np.cos(x) * z)
    N = 1000
    x0 = 0.3
    xi = float(sample_ensemble(h, 1)[0, 0, 0])
    expected = x0 + N ** -0.5 * ((2.0 + np.sin(x0)) * xi) + (1.0 / N) * (np.cos(x0) * xi)
    got = iterate_discrete(model, h, N, 1.0 / N, x0).terminal[0, 0]
    assert got == expected


def test_unit_sigma_equals_scaled_partial_sum(k2):
    N = 2 ** 10
    X = iterate_discrete(constant_model(), k2, N, 1.0, 0.0, paths=5)
    xi = sample_ensemble(k2, N, paths=5)
    np.testing.assert_array_equal(X.terminal, N ** -0.5 * xi.sum(axis=1))
    np.testing.assert_array_equal(X.values[:, 1:, :], N ** -0.5 * np.cumsum(xi, axis=1))


def test_constant_drift_with_zero_noise():
    beta = 0.7
    model = constant_model(b=lambda x, z: np.full_like(x, beta))
    N, T = 300, 1.3
    X = iterate_discrete(model, _zero_process(), N, T, 0.25)
    assert X.terminal[0, 0] == pytest.approx(0.25 + beta * steps_for(T, N) / N, abs=1e-12)
    assert X.grid[-1] == pytest.approx(steps_for(T, N) / N)


def test_unit_sigma_variance_matches_long_run_covariance(k2):
    X = iterate_discrete(constant_model(), k2, 2 ** 14, 1.0, 0.0, paths=10_000, keep="terminal")
    x2 = X.terminal[:, 0] ** 2
    se = x2.std() / np.sqrt(x2.size)
    assert abs(x2.mean() - 3.0) < 4 * se


def test_blow_up_aborts_with_step_index(k2):
    model = affine_model(drift_matrix=1e3)
    with pytest.raises(NumericalAbort) as info, np.errstate(over="ignore", invalid="ignore"):
        iterate_discrete(model, k2, 1, 400.0, 1.0)
    assert info.value.step is not None and 50 < info.value.step < 400


def test_dimension_mismatch_rejected(k2):
    with pytest.raises(SpecError):
        iterate_discrete(diagonal_sin_model(), k2, 16, 1.0, 0.0)


def test_registry_and_model_checks():
    model = model_from_registry("two_plus_sin")
    grid = np.linspace(-6, 6, 101)[:, None]
    report = check_model(model, grid, np.array([[1.0], [-1.0]]))
    assert report["Sigma"] <= 3.0 and report["Sigma_inv"] <= 1.0
    with pytest.raises(SpecError):
        model_from_registry("nope")
    with pytest.raises(SpecError):
        check_model(SlowModel(1, lambda x: 5.0 * np.ones((len(x), 1, 1)), L=2.0), grid, np.zeros((1, 1)))


def test_transform_of_constant_two():
    model = constant_model(2.0)
    tr = build_transform(model)
    x = np.linspace(-4, 4, 17)[:, None]
    np.testing.assert_allclose(tr.r(x), x / 2, atol=1e-15)
    assert np.all(tr.q(x, np.ones_like(x)) == 0)
    tabulated = build_transform(SlowModel(1, lambda x: np.full((len(x), 1, 1), 2.0), L=2.0))
    np.testing.assert_allclose(tabulated.r(x), x / 2, atol=1e-10)
    np.testing.assert_allclose(tabulated.q(x, np.ones_like(x)), 0.0, atol=1e-9)


def test_q_vanishes_for_constant_sigma_in_two_dims():
    model = constant_model(np.array([[2.0, 0.5], [0.5, 1.0]]), d=2)
    tr = build_transform(model)
    x = np.random.default_rng(0).normal(size=(20, 2))
    assert np.all(tr.q(x, x) == 0)


def test_two_plus_sin_transform_against_quadrature_oracle():
    tr = build_transform(two_plus_sin_model())
    mpmath.mp.dps = 30
    oracle = float(mpmath.quad(lambda u: 1 / (2 + mpmath.sin(u)), [0, 1]))
    r1 = tr.r(np.array([[1.0]]))
    assert r1[0, 0] == pytest.approx(oracle, abs=1e-10)
    assert abs(tr.r_inv(r1)[0, 0] - 1.0) <= 1e-10


def test_transform_round_trip_and_jacobian():
    model = two_plus_sin_model()
    tr = build_transform(model)
    x = np.linspace(-150, 150, 601)[:, None]
    np.testing.assert_allclose(tr.r_inv(tr.r(x)), x, atol=1e-8)
    eye = np.einsum("pij,pjk->pik", tr.Dr(x), model.Sigma(x))
    np.testing.assert_allclose(eye, np.ones_like(eye), atol=1e-10)


def test_diagonal_transform_round_trip():
    model = diagonal_sin_model()
    tr = build_transform(model)
    x = np.random.default_rng(1).uniform(-5, 5, (200, 2))
    np.testing.assert_allclose(tr.r_inv(tr.r(x)), x, atol=1e-8)


def test_curl_violation_names_offending_indices():
    def Sigma(x):
        out = np.zeros((len(x), 2, 2))
        out[:, 0, 0] = 2.0 + np.sin(x[:, 1])
        out[:, 1, 1] = 1.0
        return out

    model = SlowModel(2, Sigma, L=3.0, symmetric_inverse=True, r=lambda x: x)
    grid = np.random.default_rng(2).uniform(-2, 2, (50, 2))
    worst, (i, j, k, _) = curl_residual(model, grid)
    assert worst > 0.1 and i == 0 and {j, k} == {0, 1}
    with pytest.raises(SpecError, match="i=0"):
        build_transform(model)


def test_wrong_closed_form_transform_rejected():
    model = diagonal_sin_model()
    bad = SlowModel(2, model.Sigma, L=model.L, Sigma_grad=model.Sigma_grad, symmetric_inverse=True,
                    r=lambda x: x / 2)
    with pytest.raises(SpecError):
        build_transform(bad)


def test_unit_sigma_transformed_equals_original(k2):
    model = constant_model()
    tr = build_transform(model)
    X = iterate_discrete(model, k2, 256, 1.0, 0.0, paths=4)
    Y = iterate_transformed(tr, model, k2, 256, 1.0, np.zeros(1), paths=4)
    np.testing.assert_array_equal(X.values, Y.values)
    assert np.all(transform_gap(X, Y, tr) == 0)


def test_transform_gap_requires_common_grid(k2):
    model = constant_model()
    tr = build_transform(model)
    X = iterate_discrete(model, k2, 16, 1.0, 0.0)
    Y = iterate_discrete(model, k2, 32, 1.0, 0.0)
    with pytest.raises(SpecError):
        transform_gap(X, Y, tr)


def test_transformed_increments_bounded(k2):
    model = two_plus_sin_model()
    tr = build_transform(model)
    N = 2 ** 10
    Y = iterate_transformed(tr, model, k2, N, 1.0, np.zeros(1), paths=20)
    L2 = transform_constants(tr, model, [np.array([1.0]), np.array([-1.0])])
    assert np.all(np.isfinite(Y.values))
    steps = np.abs(np.diff(Y.values, axis=1))
    assert steps.max() <= N ** -0.5 * model.L + L2 / N


@pytest.mark.parametrize("N", [16, 64, 256])
def test_single_step_gap_within_taylor_remainder(k2, N):
    model = two_plus_sin_model()
    tr = build_transform(model)
    L2 = transform_constants(tr, model, [np.array([1.0]), np.array([-1.0])])
    C2 = taylor_remainder_constant(model, 1.0, N)
    for x0 in (-2.0, 0.0, 0.7, 3.0):
        X = iterate_discrete(model, k2, N, 1.0 / N, x0, paths=50)
        Y = iterate_transformed(tr, model, k2, N, 1.0 / N, tr.r(np.array([[x0]]))[0], paths=50)
        gap = transform_gap(X, Y, tr)
        assert gap.max() <= C2 * N ** -1.5 * np.exp(2 * L2 / N)


def test_window_replacement_moves_transformed_path_within_rho_bound(doubling):
    model = two_plus_sin_model()
    tr = build_transform(model)
    N, m = 2 ** 8, 8
    zetas = [np.array([v]) for v in np.linspace(-0.5, 0.5, 11)]
    L2 = transform_constants(tr, model, zetas)
    Y = iterate_transformed(tr, model, doubling, N, 1.0, np.zeros(1), paths=50)
    Ym = iterate_transformed(tr, model, replace(doubling, window=m), N, 1.0, np.zeros(1), paths=50)
    change = np.abs(Y.values - Ym.values).max()
    bound = (1 + 2 * L2) * np.sqrt(N) * rho_coefficient(doubling, m) * np.exp(2 * L2)
    assert 0 < change <= bound


def test_gap_decays_at_root_rate_for_skewed_noise():
    # +-1 noise has a vanishing third moment, which hides the N^-1/2 term; a skewed chain exposes it.
    chain = MarkovChainSpec(np.array([[0.5, 0.5], [0.2, 0.8]]))
    h = make_process(chain, ObservableSpec(values=np.array([[1.0], [-0.4]])), seed=7)
    model = two_plus_sin_model()
    tr = build_transform(model)
    scales = 2.0 ** np.array([6, 8, 10, 12])
    medians = []
    for N in scales.astype(int):
        X = iterate_discrete(model, h, N, 1.0, 0.0, paths=200)
        Y = iterate_transformed(tr, model, h, N, 1.0, np.zeros(1), paths=200)
        medians.append(np.median(transform_gap(X, Y, tr)))
    slope = np.polyfit(np.log(scales), np.log(medians), 1)[0]
    assert abs(slope + 0.5) <= 0.1


def test_flow_without_noise_solves_linear_ode():
    model = affine_model(drift_matrix=-1.0)
    run = integrate_continuous(model, _unit_roof(_zero_process()), 2 ** -3, 1.0, 1.0)
    assert run.terminal[0, 0] == pytest.approx(np.exp(-1.0), abs=1e-8)


def test_unit_roof_flow_is_exact_scaled_sum(k2):
    eps = 2 ** -4
    run = integrate_continuous(constant_model(), _unit_roof(k2), eps, 1.0, 0.5, paths=6)
    xi = sample_ensemble(k2, 256, paths=6)
    expected = 0.5 + eps * xi.sum(axis=1)
    np.testing.assert_allclose(run.terminal, expected, atol=1e-13)
    np.testing.assert_allclose(run.skeleton_terminal, expected, atol=1e-13)
    assert np.all(run.pieces == 256)


def test_flow_skeleton_reproduces_discrete_recursion(k2):
    eps = 2 ** -4
    N = 256
    model = affine_model(drift_matrix=-1.0, noise_drift=0.5)
    run = integrate_continuous(model, _unit_roof(k2), eps, 1.0, 0.2, paths=8)
    X = iterate_discrete(model, k2, N, 1.0, 0.2, paths=8, keep="terminal")
    np.testing.assert_allclose(run.skeleton_terminal, X.terminal, atol=1e-12)
    # The flow itself differs from the recursion by the O(eps^2) drift discretization.
    assert np.abs(run.terminal - X.terminal).max() < 4 * eps ** 2


def test_flow_piece_gap_within_bound(k2):
    eps = 2 ** -5
    model = two_plus_sin_model()
    susp = build_suspension(k2, lambda v: 1 + 0.25 * v[..., 0], 4 / 3)
    run = integrate_continuous(model, susp, eps, 1.0, 0.0, paths=500, roof_range=(0.75, 1.25))
    n = np.arange(1, run.piece_gap.size + 1)
    ratio = run.piece_gap / piece_gap_bound(eps, model.L, susp.roof_bound, n)
    assert ratio.max() <= 10.0
    assert run.substeps >= 16 * 1.25 / 0.75


def test_flow_rejects_bad_scale(k2):
    with pytest.raises(SpecError):
        integrate_continuous(constant_model(), _unit_roof(k2), 1.0, 1.0, 0.0)


def test_iid_gaussian_slow_motion_is_finite():
    h = make_process(IidSpec("gaussian"), seed=4)
    X = iterate_discrete(two_plus_sin_model(), h, 128, 1.0, 0.0, paths=10)
    assert np.all(np.isfinite(X.values))
