import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from paneldml.errors import DataValidationError, SingularMatrixError
from paneldml.first_stage import FirstStageConfig, cross_fit, predict_nuisances
from paneldml.panel_core import PanelDataset
from paneldml.second_stage_ld import (OlsFit, cluster_robust_covariance, doubly_robust_dml,
                                      drdml_from_nuisances, orthogonal_ols, wald_intervals)

from conftest import make_residuals, random_panel


def test_ols_single_regressor_ratio():
    res = make_residuals([1.0, -1.0], [2.0, -2.0], 2, 1)
    with pytest.warns(UserWarning, match="d/N"):
        assert orthogonal_ols(res).beta[0] == pytest.approx(2.0, abs=1e-15)


def test_ols_exact_linear_system(rng):
    D = rng.standard_normal((30, 3))
    beta = np.array([0.5, -1.25, 2.0])
    fit = orthogonal_ols(make_residuals(D, D @ beta, 10, 3))
    assert np.allclose(fit.beta, beta, atol=1e-12, rtol=0)
    assert np.allclose(fit.covariance, 0.0, atol=1e-20)


def test_ols_matches_dense_solve(rng):
    D = rng.standard_normal((4, 2))
    y = rng.standard_normal(4)
    with pytest.warns(UserWarning, match="d/N = 0.50"):
        fit = orthogonal_ols(make_residuals(D, y, 2, 2))
    ref = np.linalg.lstsq(D, y, rcond=None)[0]
    assert np.allclose(fit.beta, ref, atol=1e-10, rtol=0)
    assert np.allclose(fit.gram, D.T @ D / 4, atol=1e-15)
    assert fit.n_effective == 4


def test_ols_singular_gram_reports_eigenvalue(rng):
    D = rng.standard_normal((12, 1)) @ np.ones((1, 2))
    with pytest.raises(SingularMatrixError, match="min eigenvalue") as info:
        orthogonal_ols(make_residuals(D, rng.standard_normal(12), 6, 2))
    assert info.value.min_eigenvalue is not None


def test_ols_requires_d_le_n(rng):
    with pytest.raises(DataValidationError, match="d <= N"):
        orthogonal_ols(make_residuals(rng.standard_normal((2, 3)), [1.0, 2.0], 2, 1))


def _per_observation_sandwich(D, y, beta):
    n = len(y)
    Q = D.T @ D / n
    u = y - D @ beta
    meat = sum(np.outer(D[i], D[i]) * u[i] ** 2 for i in range(n)) / n
    Qi = np.linalg.inv(Q)
    return Qi @ meat @ Qi


def test_singleton_clusters_reduce_to_white(rng):
    # one item per group: (group, period) clusters are single observations
    D = rng.standard_normal((40, 3))
    y = D @ np.ones(3) + rng.standard_normal(40)
    res = make_residuals(D, y, 8, 5)
    fit = orthogonal_ols(res)
    ref = _per_observation_sandwich(D, y, fit.beta)
    assert np.allclose(fit.covariance, ref, atol=1e-12, rtol=0)
    assert np.allclose(cluster_robust_covariance(res, fit.beta, "observation"), ref, atol=1e-12)


def test_zero_residuals_give_zero_covariance(rng):
    D = rng.standard_normal((16, 2))
    res = make_residuals(D, D @ np.array([1.0, 2.0]), 4, 4, group=[0, 0, 1, 1])
    omega = cluster_robust_covariance(res, [1.0, 2.0])
    assert np.array_equal(omega, np.zeros((2, 2))) or np.abs(omega).max() < 1e-28


def test_brute_force_sandwich_hand_instance():
    # M=2 groups, C=2 items each, T=1
    D = np.array([[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1], [1.5, 0.2]])
    y = np.array([0.4, -1.0, 2.2, 0.9])
    res = make_residuals(D, y, 4, 1, group=[0, 0, 1, 1])
    beta = np.array([0.3, -0.2])
    n = 4
    Q = D.T @ D / n
    u = y - D @ beta
    meat = np.zeros((2, 2))
    for rows in ([0, 1], [2, 3]):
        s = np.zeros(2)
        for i in rows:
            s += D[i] * u[i]
        meat += np.outer(s, s)
    meat /= n
    ref = np.linalg.inv(Q) @ meat @ np.linalg.inv(Q)
    assert np.allclose(cluster_robust_covariance(res, beta), ref, atol=1e-13, rtol=0)
    G = 2
    assert np.allclose(cluster_robust_covariance(res, beta, small_sample=True),
                       ref * G / (G - 1), atol=1e-13)


def test_group_clustering_pools_periods(rng):
    D = rng.standard_normal((12, 1))
    y = rng.standard_normal(12)
    res = make_residuals(D, y, 4, 3, group=[0, 0, 1, 1])
    beta = np.array([0.1])
    u = y - D[:, 0] * beta[0]
    s = [np.sum((D[:, 0] * u)[np.repeat([0, 0, 1, 1], 3) == g]) for g in (0, 1)]
    q = np.mean(D[:, 0] ** 2)
    ref = (s[0] ** 2 + s[1] ** 2) / 12 / q ** 2
    assert cluster_robust_covariance(res, beta, "group")[0, 0] == pytest.approx(ref, rel=1e-12)


def test_unknown_cluster_definition(rng):
    res = make_residuals(rng.standard_normal((4, 1)), rng.standard_normal(4), 2, 2)
    with pytest.raises(DataValidationError, match="cluster"):
        cluster_robust_covariance(res, [0.0], "county")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), d=st.integers(1, 4), C=st.integers(1, 3))
def test_covariance_is_psd(seed, d, C):
    r = np.random.default_rng(seed)
    M, T = 5, 4
    D = r.standard_normal((M * C * T, d))
    y = D @ r.standard_normal(d) + r.standard_normal(M * C * T)
    res = make_residuals(D, y, M * C, T, group=np.repeat(np.arange(M), C))
    fit = orthogonal_ols(res)
    assert np.allclose(fit.covariance, fit.covariance.T, atol=0)
    ev = np.linalg.eigvalsh(fit.covariance)
    assert ev.min() >= -1e-10 * max(1.0, ev.max())
    assert np.allclose(fit.std_errors, np.sqrt(np.diag(fit.covariance) / fit.n_effective))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(1e-3, 1e3), j=st.integers(0, 2))
def test_ols_scale_equivariance(seed, scale, j):
    r = np.random.default_rng(seed)
    D = r.standard_normal((24, 3))
    y = D @ np.array([1.0, -0.5, 0.3]) + r.standard_normal(24)
    base = orthogonal_ols(make_residuals(D, y, 6, 4))
    D2 = D.copy()
    D2[:, j] *= scale
    fit = orthogonal_ols(make_residuals(D2, y, 6, 4))
    expected = base.beta.copy()
    expected[j] /= scale
    assert np.allclose(fit.beta, expected, rtol=1e-9, atol=1e-12)
    assert np.allclose(D2 @ fit.beta, D @ base.beta, atol=1e-10)


# --------------------------------------------------------------- DRDML


def test_drdml_zero_nuisances_is_plain_ols(rng):
    data = random_panel(rng, n_items=8, n_periods=5, d=2)
    fit = drdml_from_nuisances(data, np.zeros(data.y.shape), np.zeros(data.treatments.shape))
    D = data.treatments.reshape(-1, 2)
    ref = np.linalg.lstsq(D, data.y.reshape(-1), rcond=None)[0]
    assert np.allclose(fit.beta, ref, atol=1e-12)
    assert fit.estimator == "drdml"


def test_drdml_perfect_nuisances_recover_beta(rng):
    I, T, p = 6, 5, 3
    Z = rng.standard_normal((I, T, p))
    d0 = Z @ np.array([[1.0, 0.0], [0.5, -1.0], [0.0, 0.3]])
    # exact identification needs E_N[V d0'] = 0, the population moment, to hold in-sample
    V = rng.standard_normal((I * T, 2))
    F = d0.reshape(-1, 2)
    V = (V - F @ np.linalg.lstsq(F, V, rcond=None)[0]).reshape(I, T, 2)
    D = d0 + V
    beta = np.array([1.5, -0.7])
    g = Z @ np.array([0.2, 0.0, -0.4])
    y = D @ beta + g
    l0 = d0 @ beta + g
    data = PanelDataset(y=y, treatments=D, controls=Z, group=np.arange(I) // 2)
    fit = drdml_from_nuisances(data, l0, d0)
    assert np.allclose(fit.beta, beta, atol=1e-12)


def test_drdml_matches_two_matrix_formula(rng):
    data = random_panel(rng, n_items=6, n_periods=4, d=2)
    l_hat = rng.standard_normal(data.y.shape)
    d_hat = rng.standard_normal(data.treatments.shape)
    D = data.treatments.reshape(-1, 2)
    V = D - d_hat.reshape(-1, 2)
    W = (data.y - l_hat).reshape(-1)
    ref = np.linalg.solve(V.T @ D, V.T @ W)
    assert np.allclose(drdml_from_nuisances(data, l_hat, d_hat).beta, ref, atol=1e-10)


def test_drdml_from_fits_uses_out_of_fold_nuisances(rng):
    data = random_panel(rng, n_items=8, n_periods=6, d=1, p=2)
    fits = cross_fit(data, config=FirstStageConfig(lambda_policy="fixed:0.05", k_folds=3))
    l_hat, d_hat, _ = predict_nuisances(data, fits)
    a = doubly_robust_dml(data, fits)
    b = drdml_from_nuisances(data, l_hat, d_hat)
    assert np.array_equal(a.beta, b.beta)


def test_drdml_singular_left_matrix(rng):
    data = random_panel(rng, d=1)
    with pytest.raises(SingularMatrixError):
        drdml_from_nuisances(data, np.zeros(data.y.shape), data.treatments)


# ---------------------------------------------------------------- Wald


def _fit(beta, se):
    beta, se = np.asarray(beta, float), np.asarray(se, float)
    d = len(beta)
    return OlsFit(beta, np.eye(d), np.diag(se ** 2), se, 1)


def test_wald_multiplier_at_five_percent():
    ci = wald_intervals(_fit([0.0], [1.0]), 0.05)
    assert ci.upper[0] == pytest.approx(1.959964, abs=1e-5)
    assert ci.level == 0.95 and ci.kind == "pointwise"


def test_wald_multiplier_at_32_percent():
    ci = wald_intervals(_fit([0.0], [1.0]), 0.32)
    assert ci.upper[0] == pytest.approx(0.9945, abs=1e-4)


def test_wald_zero_variance_degenerate():
    ci = wald_intervals(_fit([1.5, -2.0], [0.0, 1.0]))
    assert ci.lower[0] == ci.upper[0] == 1.5
    assert ci.lower[1] < -2.0 < ci.upper[1]


@pytest.mark.parametrize("xi", [0.0, 1.0, -0.1])
def test_wald_rejects_bad_level(xi):
    with pytest.raises(DataValidationError):
        wald_intervals(_fit([0.0], [1.0]), xi)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(0.001, 0.999))
def test_wald_width_formula(betas, xi):
    from scipy.stats import norm
    se = np.abs(np.array(betas)) / 7 + 0.1
    ci = wald_intervals(_fit(betas, se), xi)
    assert np.all(ci.lower <= ci.upper)
    assert np.allclose(ci.upper - ci.lower, 2 * norm.ppf(1 - xi / 2) * se, rtol=1e-12)
