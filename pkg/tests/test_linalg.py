import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vectorfit.errors import ContractError, DimensionError, ValidationError
from vectorfit.linalg import (
    effective_rank,
    orthogonality_defect,
    reconstruct,
    svd_thin,
    truncation_error,
)


def random_orthonormal(rng, n, r):
    q, _ = np.linalg.qr(rng.standard_normal((n, r)))
    return q


def test_identity():
    f = svd_thin(np.eye(3))
    assert np.array_equal(f.sigma, np.ones(3))
    np.testing.assert_allclose(f.U, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(f.V, np.eye(3), atol=1e-15)


def test_diagonal_with_negative_entry():
    f = svd_thin(np.diag([3.0, -2.0]))
    np.testing.assert_allclose(f.sigma, [3.0, 2.0])
    np.testing.assert_allclose(reconstruct(f), np.diag([3.0, -2.0]), atol=1e-15)
    # canonical sign: largest-magnitude entry of each U column is positive
    assert np.all(f.U[np.argmax(np.abs(f.U), axis=0), range(2)] > 0)


def test_random_8x5_residual(rng):
    W = rng.standard_normal((8, 5))
    f = svd_thin(W)
    assert np.linalg.norm(reconstruct(f) - W) <= 1e-10 * np.linalg.norm(W)
    assert f.U.shape == (8, 5) and f.V.shape == (5, 5)


def test_agrees_with_lapack_singular_values(rng):
    W = rng.standard_normal((12, 7))
    np.testing.assert_allclose(svd_thin(W).sigma, np.linalg.svd(W, compute_uv=False), rtol=1e-12)


def test_float32_input_stays_float32(rng):
    W = rng.standard_normal((20, 9)).astype(np.float32)
    f = svd_thin(W)
    assert f.U.dtype == f.sigma.dtype == f.V.dtype == np.float32
    assert np.linalg.norm(reconstruct(f).astype(np.float64) - W) <= 1e-5 * np.linalg.norm(W)
    r = f.rank_dim
    assert orthogonality_defect(f.U) <= 1e-6 * np.sqrt(r)
    assert orthogonality_defect(f.V) <= 1e-6 * np.sqrt(r)


def test_rank_deficient_gets_orthonormal_completion(rng):
    W = np.outer(rng.standard_normal(6), rng.standard_normal(4))
    f = svd_thin(W)
    assert np.count_nonzero(f.sigma > 1e-12) == 1
    assert orthogonality_defect(f.U) <= 1e-12 * 2
    assert orthogonality_defect(f.V) <= 1e-12 * 2
    np.testing.assert_allclose(reconstruct(f), W, atol=1e-12)


def test_zero_matrix():
    f = svd_thin(np.zeros((3, 5)))
    assert np.array_equal(f.sigma, np.zeros(3))
    assert orthogonality_defect(f.U) <= 1e-12


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.ones(3), np.array([[1.0, np.nan]])])
def test_invalid_inputs(bad):
    with pytest.raises(ValidationError):
        svd_thin(bad)


def test_reconstruct_overrides():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((6, 4))
    f = svd_thin(W)
    np.testing.assert_allclose(reconstruct(f, f.sigma), W, atol=1e-12)
    assert np.array_equal(reconstruct(f, np.zeros(4)), np.zeros((6, 4)))
    bumped = f.sigma.copy()
    bumped[0] += 1.0
    assert abs(np.linalg.norm(reconstruct(f, bumped) - reconstruct(f)) - 1.0) <= 1e-10
    W2, b = reconstruct(f, bias=np.ones(6))
    assert b.shape == (6,)
    with pytest.raises(DimensionError):
        reconstruct(f, np.zeros(3))


def test_effective_rank_examples(rng):
    assert effective_rank(np.zeros((4, 4))) == 0
    assert effective_rank(np.diag([5.0, 3.0, 0.0, 0.0])) == 2
    U, V = random_orthonormal(rng, 12, 10), random_orthonormal(rng, 10, 10)
    d = np.zeros(10)
    d[rng.choice(10, 7, replace=False)] = rng.uniform(0.5, 2.0, 7)
    assert effective_rank((U * d) @ V.T) == 7
    with pytest.raises(ContractError):
        effective_rank(np.eye(2), tau_rel=0.0)


def test_truncation_error_examples():
    assert truncation_error([3.0, 2.0], 2) == 0.0
    assert truncation_error([3.0, 4.0], 0) == pytest.approx(5.0, abs=1e-15)
    with pytest.raises(ContractError):
        truncation_error([1.0], 2)


def test_truncation_error_matches_explicit_truncation(rng):
    A = rng.standard_normal((8, 6))
    f = svd_thin(A)
    for k in range(7):
        Ak = (f.U[:, :k] * f.sigma[:k]) @ f.V[:, :k].T
        assert abs(truncation_error(f.sigma, k) - np.linalg.norm(A - Ak)) <= 1e-10


def test_orthogonality_defect_examples(rng):
    assert orthogonality_defect(np.eye(4)) == 0.0
    assert orthogonality_defect(2 * np.eye(2)) == pytest.approx(3 * np.sqrt(2))
    assert orthogonality_defect(random_orthonormal(rng, 9, 9)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 14), st.integers(1, 14), st.integers(0, 2**20))
def test_svd_properties(m, n, seed):
    W = np.random.default_rng(seed).standard_normal((m, n))
    f = svd_thin(W)
    r = min(m, n)
    assert f.sigma.shape == (r,)
    assert np.all(f.sigma >= 0) and np.all(np.diff(f.sigma) <= 0)
    assert np.linalg.norm(reconstruct(f) - W) <= 1e-10 * max(np.linalg.norm(W), 1e-300)
    assert orthogonality_defect(f.U) <= 1e-12 * np.sqrt(r)
    assert orthogonality_defect(f.V) <= 1e-12 * np.sqrt(r)
    ft = svd_thin(W.T)
    np.testing.assert_allclose(ft.sigma, f.sigma, atol=1e-10)
