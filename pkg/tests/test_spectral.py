from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eotdiff import ContractError, circle_oracle, condition_bounds, h_spectrum, perturbation_bound, solve_ot
from eotdiff.errors import BoundInapplicableError
from eotdiff.linalg import sym_eig
from eotdiff.derivatives import build_H
from eotdiff.spectral import (
    asymptotic_rates,
    circle_points,
    eig_from_singular,
    normalized_top_eig,
    perturbation_sizes,
    reduced_system,
)

# H-matrix spectrum of the N=8, eps=0.5 circle coupling, 40-digit arithmetic (mpmath)
CIRCLE_8_EIGS = [
    0.25, 0.23323266789492408, 0.23323266789492408, 0.19761663557304857,
    0.19761663557304857, 0.16741994220433796, 0.16741994220433796, 0.15627417017199219,
    0.093725829828007813, 0.082580057795662045, 0.082580057795662045, 0.052383364426951426,
    0.052383364426951426, 0.016767332105075923, 0.016767332105075923, 0.0,
]


def _uniform_plan(seed, m, n, eps=0.1):
    rng = np.random.default_rng(seed)
    return solve_ot(rng.uniform(size=(m, 2)), rng.uniform(size=(n, 2)), eps, tol=1e-13)[1]


def test_circle_spectrum_reference():
    oracle = circle_oracle(8, 0.5)
    eig = sym_eig(build_H(oracle.coupling))
    np.testing.assert_allclose(eig.eigenvalues, CIRCLE_8_EIGS, atol=1e-15)
    np.testing.assert_allclose(oracle.lambda_min_positive, CIRCLE_8_EIGS[-2], rtol=1e-14)


def test_circle_oracle_matches_sinkhorn():
    pts = circle_points(32)
    _, plan = solve_ot(pts, pts, 0.1, tol=1e-14)
    np.testing.assert_allclose(plan.coupling, circle_oracle(32, 0.1).coupling, atol=1e-12)


def test_permutation_coupling():
    pi = np.eye(4)[[2, 0, 3, 1]] / 4
    rep = h_spectrum(pi)
    np.testing.assert_allclose(rep.eigenvalues, [0.5] * 4 + [0.0] * 4, atol=1e-15)
    assert rep.zero_multiplicity == 4
    assert math.isinf(rep.condition_number)
    assert not rep.kernel_is_simple


def test_uniform_product_coupling():
    rep = h_spectrum(np.full((3, 3), 1 / 9))
    np.testing.assert_allclose(rep.lambda_max, 2 / 3)
    np.testing.assert_allclose(rep.lambda_min_positive, 1 / 3)
    assert rep.kernel_is_simple
    np.testing.assert_allclose(rep.condition_number, 2.0)


def test_spectrum_contracts():
    with pytest.raises(ContractError):
        h_spectrum(np.array([[0.5, -0.1], [0.1, 0.5]]))
    with pytest.raises(ContractError):
        h_spectrum(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ContractError):
        eig_from_singular(np.array([[0.3, 0.2], [0.2, 0.3]]) * 0.9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 7), st.integers(2, 7))
def test_spectrum_from_singular_values(seed, m, n):
    plan = _uniform_plan(seed, m, n)
    eig = sym_eig(build_H(plan))
    closed = eig_from_singular(plan, return_vectors=True)
    np.testing.assert_allclose(closed.eigenvalues, eig.eigenvalues, atol=1e-13)
    q = closed.eigenvectors
    np.testing.assert_allclose(q.T @ q, np.eye(m + n), atol=1e-10)
    np.testing.assert_allclose(build_H(plan) @ q, q * closed.eigenvalues, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 7), st.integers(2, 7), st.sampled_from([0.05, 0.2, 1.0]))
def test_condition_number_within_bounds(seed, m, n, eps):
    plan = _uniform_plan(seed, m, n, eps)
    sigma = np.linalg.svd(plan.coupling, compute_uv=False)
    lower, upper = condition_bounds(sigma[0], sigma[1], m, n)
    kappa = h_spectrum(plan).condition_number
    assert lower * (1 - 1e-9) <= kappa <= upper * (1 + 1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 7), st.integers(2, 7))
def test_kernel_and_psd(seed, m, n):
    plan = _uniform_plan(seed, m, n, 0.3)
    rep = h_spectrum(plan)
    assert rep.kernel_residual <= 1e-12 * rep.lambda_max
    assert rep.eigenvalues[-1] >= -1e-14
    assert rep.zero_multiplicity == 1


def test_normalized_top_eigenpair():
    plan = _uniform_plan(5, 4, 6)
    lam, vec = normalized_top_eig(plan)
    np.testing.assert_allclose(lam, 1.0, rtol=1e-12)
    np.testing.assert_allclose(vec, np.ones(6), rtol=1e-9)


def test_reduced_system_is_invertible():
    plan = _uniform_plan(6, 5, 5, 0.2)
    A = reduced_system(plan)
    assert A.shape == (4, 4)
    assert np.linalg.eigvalsh(0.5 * (A + A.T))[0] > 0


def test_perturbation_bound():
    plan = _uniform_plan(7, 5, 5, 0.2)
    sigma = np.linalg.svd(plan.coupling, compute_uv=False)
    shift, lower, upper = perturbation_bound(1e-6, 1e-6, sigma[0], sigma[1], 5, 5)
    assert shift == 2e-6 and 0 < lower < upper
    with pytest.raises(BoundInapplicableError):
        perturbation_bound(1.0, 1.0, sigma[0], sigma[1], 5, 5)
    delta, delta2 = perturbation_sizes(plan.coupling, plan.coupling)
    assert delta < 1e-12 and delta2 == 0.0


def test_condition_bounds_invalid_gap():
    with pytest.raises(ContractError):
        condition_bounds(0.1, 0.2, 3, 3)


@pytest.mark.parametrize("N, eps, regime", [
    (1000, 0.1, "large_N"),
    (50, 1e-3, "small_eps"),
    (math.ceil(2 * math.pi / math.sqrt(0.01)), 0.01, "transitional"),
])
def test_regime_tags(N, eps, regime):
    assert asymptotic_rates(N, eps).regime == regime


def test_asymptotic_rates_formulas():
    rates = asymptotic_rates(100, 0.01)
    np.testing.assert_allclose(rates.pred_large_N, 0.01 / 400)
    r = math.exp(-4 * math.sin(math.pi / 100) ** 2 / 0.01) / 100 ** 2
    np.testing.assert_allclose(rates.pred_small_eps, 4 * math.pi ** 2 * r / 100)
