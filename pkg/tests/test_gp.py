import numpy as np
import pytest

from timepfn.errors import FactorizationFailed
from timepfn.gp import JITTER_LADDER, cholesky_with_jitter, sample_latent
from timepfn.kernels import evaluate_kernel, periodic, squared_exponential, unit_grid


def test_positive_definite_needs_no_jitter():
    A = np.random.default_rng(0).standard_normal((6, 6))
    K = A @ A.T + 6 * np.eye(6)
    L, jitter = cholesky_with_jitter(K)
    assert jitter == 0.0
    np.testing.assert_allclose(L @ L.T, K, rtol=1e-12)
    assert np.allclose(L, np.tril(L))


def test_rank_deficient_matrix_gets_ladder_jitter():
    v = np.arange(1.0, 6.0)
    K = np.outer(v, v)  # rank one
    L, jitter = cholesky_with_jitter(K)
    scale = np.mean(np.diag(K))
    assert jitter > 0
    assert any(np.isclose(jitter, lvl * scale) for lvl in JITTER_LADDER)
    np.testing.assert_allclose(L @ L.T, K + jitter * np.eye(5), rtol=1e-8, atol=1e-10)


def test_zero_matrix_uses_unit_scale():
    L, jitter = cholesky_with_jitter(np.zeros((3, 3)))
    assert jitter == pytest.approx(1e-8)


def test_indefinite_matrix_fails_loudly():
    K = np.diag([1.0, -5.0, 1.0])
    with pytest.raises(FactorizationFailed):
        cholesky_with_jitter(K)


def test_non_finite_and_non_square_inputs():
    with pytest.raises(FactorizationFailed):
        cholesky_with_jitter(np.array([[1.0, np.nan], [np.nan, 1.0]]))
    with pytest.raises(ValueError):
        cholesky_with_jitter(np.ones((2, 3)))


def test_latent_is_deterministic_in_rng():
    k = periodic(0.1)
    a = sample_latent(k, 64, np.random.default_rng(5)).values
    b = sample_latent(k, 64, np.random.default_rng(5)).values
    assert np.array_equal(a, b) and a.shape == (64,)


def test_sample_latent_rejects_short_series():
    with pytest.raises(ValueError):
        sample_latent(squared_exponential(0.5), 1, np.random.default_rng(0))


def test_covariance_of_draws_matches_gram():
    T, n = 6, 4000
    k = squared_exponential(0.4)
    rng = np.random.default_rng(11)
    X = np.stack([sample_latent(k, T, rng).values for _ in range(n)])
    emp = X.T @ X / n
    K = evaluate_kernel(k, unit_grid(T))
    assert np.linalg.norm(emp - K) / np.linalg.norm(K) < 0.08
