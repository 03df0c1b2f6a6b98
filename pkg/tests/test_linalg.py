from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eotdiff import ContractError, sym_eig, tsvd_solve
from eotdiff.errors import DegenerateMatrixError
from eotdiff.linalg import retained_rank
from eotdiff.oracle import dense_pinv_apply


def _psd(rng, n, rank):
    A = rng.standard_normal((n, rank))
    return A @ A.T


def test_sym_eig_descending_and_reconstructs():
    H = _psd(np.random.default_rng(0), 6, 6)
    eig = sym_eig(H)
    assert np.all(np.diff(eig.eigenvalues) <= 0)
    np.testing.assert_allclose(eig.reconstruct(), H, atol=1e-12)


def test_sym_eig_matches_svd_for_psd():
    H = _psd(np.random.default_rng(1), 7, 7)
    np.testing.assert_allclose(sym_eig(H).eigenvalues, np.linalg.svd(H, compute_uv=False), rtol=1e-12)


def test_sym_eig_rejects_asymmetric_and_nonfinite():
    with pytest.raises(ContractError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ContractError):
        sym_eig(np.array([[np.inf, 0.0], [0.0, 1.0]]))
    with pytest.raises(ContractError):
        sym_eig(np.ones((2, 3)))


def test_tsvd_solve_on_invertible_matrix_is_exact():
    H = np.diag([4.0, 2.0, 1.0])
    x, k = tsvd_solve(H, np.array([4.0, 2.0, 1.0]))
    assert k == 3
    np.testing.assert_allclose(x, np.ones(3), rtol=1e-15)


def test_tsvd_truncation_drops_small_modes():
    H = np.diag([1.0, 1e-3, 1e-12])
    x, k = tsvd_solve(H, np.ones(3), alpha=1e-6)
    assert k == 2
    np.testing.assert_allclose(x, [1.0, 1e3, 0.0])


def test_alpha_zero_uses_machine_cutoff():
    lam = np.array([1.0, 1e-14, 1e-17])
    assert retained_rank(lam, 0.0) == 2
    assert retained_rank(lam, 1e-10) == 1


def test_tsvd_contracts():
    with pytest.raises(ContractError):
        tsvd_solve(np.eye(2), np.ones(2), alpha=1.5)
    with pytest.raises(ContractError):
        tsvd_solve(np.eye(2), np.ones(3))
    with pytest.raises(DegenerateMatrixError):
        tsvd_solve(np.zeros((2, 2)), np.ones(2))


def test_tsvd_trailing_rhs_dimensions():
    rng = np.random.default_rng(2)
    H = _psd(rng, 5, 5)
    rhs = rng.standard_normal((5, 3, 2))
    x, _ = tsvd_solve(H, rhs)
    np.testing.assert_allclose(np.einsum("ij,jab->iab", H, x), rhs, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**32 - 1), st.data())
def test_tsvd_matches_dense_pseudo_inverse(n, seed, data):
    rank = data.draw(st.integers(1, n))
    rng = np.random.default_rng(seed)
    H = _psd(rng, n, rank)
    rhs = rng.standard_normal(n)
    x, _ = tsvd_solve(H, rhs, alpha=1e-12)
    ref = dense_pinv_apply(H, rhs)
    np.testing.assert_allclose(x, ref, atol=1e-8 * max(1.0, np.abs(ref).max()))
    # solution has no component in the numerical null space
    eig = sym_eig(H)
    null = eig.eigenvectors[:, eig.eigenvalues <= 1e-12 * eig.eigenvalues[0]]
    assert np.abs(null.T @ x).max(initial=0.0) <= 1e-8 * max(1.0, np.abs(x).max())
