import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from augspec import linalg


def rand_matrix(seed, m, n):
    return np.random.default_rng(seed).standard_normal((m, n))


def test_svd_diagonal():
    res = linalg.svd(np.diag([3.0, 2.0]))
    np.testing.assert_allclose(res.s, [3.0, 2.0])
    np.testing.assert_allclose(np.abs(res.u), np.eye(2))


def test_svd_rank_one():
    res = linalg.svd(np.outer([1.0, 0.0], [0.0, 1.0]))
    np.testing.assert_allclose(res.s, [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(res.u[:, 0], [1.0, 0.0])
    np.testing.assert_allclose(res.v[:, 0], [0.0, 1.0])


def test_svd_zero_matrix():
    res = linalg.svd(np.zeros((3, 2)))
    np.testing.assert_array_equal(res.s, 0.0)
    np.testing.assert_array_equal(res.u, np.eye(3, 2))


def test_svd_rejects_nan():
    with pytest.raises(linalg.LinalgError, match="non-finite"):
        linalg.svd(np.array([[1.0, np.nan]]))


def test_svd_sign_convention():
    a = rand_matrix(3, 6, 4)
    r1 = linalg.svd(a)
    r2 = linalg.svd(a.copy())
    np.testing.assert_array_equal(r1.u, r2.u)
    idx = np.argmax(np.abs(r1.u), axis=0)
    assert np.all(r1.u[idx, np.arange(4)] >= 0)


def test_svd_convergence_error_fields():
    err = linalg.SvdConvergenceError("boom", 2)
    assert err.iterations == 2
    assert "2 driver attempts" in str(err)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 10_000))
def test_svd_reconstructs(m, n, seed):
    a = rand_matrix(seed, m, n)
    res = linalg.svd(a)
    np.testing.assert_allclose(res.reconstruct(), a, atol=1e-12)
    assert np.all(np.diff(res.s) <= 1e-15)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(min(m, n)), atol=1e-12)


def test_truncate_is_eckart_young_optimal():
    a = rand_matrix(0, 8, 5)
    res = linalg.svd(a)
    for d in range(6):
        err = linalg.op_norm(a - linalg.truncate(res, d))
        expect = res.s[d] if d < 5 else 0.0
        assert err == pytest.approx(expect, abs=1e-12)


def test_truncate_rank_out_of_range():
    with pytest.raises(linalg.LinalgError):
        linalg.truncate(linalg.svd(np.eye(3)), 4)


def test_op_norm_values():
    assert linalg.op_norm(np.eye(4)) == pytest.approx(1.0)
    assert linalg.op_norm(np.diag([2.0, -5.0])) == pytest.approx(5.0)
    assert linalg.op_norm(np.ones((3, 3))) == pytest.approx(3.0)


def test_subspace_distance_cases():
    e = np.eye(3)
    assert linalg.subspace_distance(e[:, :1], e[:, :1]) == pytest.approx(0.0, abs=1e-15)
    assert linalg.subspace_distance(e[:, :1], e[:, 1:2]) == pytest.approx(1.0)
    theta = 0.3
    b = np.array([[np.cos(theta)], [np.sin(theta)], [0.0]])
    assert linalg.subspace_distance(e[:, :1], b) == pytest.approx(np.sin(theta), abs=1e-12)


def test_subspace_distance_rejects_non_orthonormal():
    with pytest.raises(linalg.LinalgError, match="orthonormal"):
        linalg.subspace_distance(np.array([[2.0], [0.0]]), np.array([[1.0], [0.0]]))


def test_sym_inv_sqrt_identity_and_diag():
    np.testing.assert_allclose(linalg.sym_inv_sqrt(np.eye(3), eps=0.0), np.eye(3))
    np.testing.assert_allclose(linalg.sym_inv_sqrt(np.diag([4.0, 9.0]), eps=0.0), np.diag([0.5, 1 / 3]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_sym_inv_sqrt_whitens(d, seed):
    b = rand_matrix(seed, d + 3, d)
    m = b.T @ b
    w = linalg.sym_inv_sqrt(m, eps=0.0)
    np.testing.assert_allclose(w @ m @ w, np.eye(d), atol=1e-8)
    np.testing.assert_allclose(w, w.T)


def test_sym_inv_sqrt_errors():
    with pytest.raises(linalg.LinalgError, match="symmetric"):
        linalg.sym_inv_sqrt(np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(linalg.LinalgError, match="positive definite"):
        linalg.sym_inv_sqrt(np.diag([1.0, -1.0]), eps=1e-8)


def test_sym_sqrt_squares_back():
    b = rand_matrix(1, 5, 3)
    m = b.T @ b
    r = linalg.sym_sqrt(m)
    np.testing.assert_allclose(r @ r, m, atol=1e-12)


def test_ridge_solve_cases():
    np.testing.assert_allclose(linalg.ridge_solve(np.eye(3), np.array([1.0, 2.0, 3.0]), eps=0.0), [1, 2, 3])
    np.testing.assert_allclose(linalg.ridge_solve(np.zeros((2, 2)), np.array([1.0, 1.0]), eps=1.0), [1, 1])
    with pytest.raises(linalg.LinalgError, match="singular"):
        linalg.ridge_solve(np.zeros((2, 2)), np.ones(2), eps=0.0)


def test_ridge_solve_matrix_rhs():
    m = rand_matrix(4, 4, 4) + 5 * np.eye(4)
    rhs = rand_matrix(5, 4, 2)
    x = linalg.ridge_solve(m, rhs, eps=1e-3)
    np.testing.assert_allclose((m + 1e-3 * np.eye(4)) @ x, rhs, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 10_000), st.floats(1e-6, 1.0))
def test_weyl_never_violated(m, n, seed, scale):
    a = rand_matrix(seed, m, n)
    b = a + scale * rand_matrix(seed + 1, m, n)
    assert linalg.weyl_excess(a, b) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 7), st.integers(0, 10_000), st.floats(1e-4, 0.5))
def test_wedin_bounds_hold(m, seed, scale):
    a = rand_matrix(seed, m, m)
    b = a + scale * rand_matrix(seed + 7, m, m)
    for d in range(1, m):
        chk = linalg.wedin_check(a, b, d)
        if chk.bound is not None:
            assert chk.distance <= chk.bound + 1e-9
        if chk.bound_self_gap is not None:
            assert chk.distance <= chk.bound_self_gap + 1e-9


def test_matrix_text_roundtrip_is_exact(tmp_path):
    a = rand_matrix(9, 3, 4) * 1e-7
    path = tmp_path / "m.txt"
    linalg.save_matrix(path, a)
    np.testing.assert_array_equal(linalg.load_matrix(path), a)


def test_loads_matrix_shape_errors():
    with pytest.raises(linalg.LinalgError):
        linalg.loads_matrix("2 2\n1 2\n")
    with pytest.raises(linalg.LinalgError):
        linalg.loads_matrix("1 2\n1 2 3\n")
