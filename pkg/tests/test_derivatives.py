from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eotdiff import (
    ContractError,
    build_H,
    derivative_bundle,
    eot_distance,
    grad_eot,
    grad_eot_implicit,
    grad_sinkhorn,
    hessian_eot,
    marginal_error,
    sinkhorn_distance,
    solve_ot,
    theta_derivatives,
)
from eotdiff.derivatives import grad_hessian_theta, kernel_vector
from eotdiff.oracle import FDConfig, fd_gradient, fd_hessian
from eotdiff.sinkhorn import cost_derivatives

EPS = 0.05


def _problem(seed, m=6, n=7, d=2, eps=EPS):
    rng = np.random.default_rng(seed)
    Y, Ys = rng.uniform(size=(m, d)), rng.uniform(size=(n, d))
    C, plan = solve_ot(Y, Ys, eps, tol=1e-13)
    dC, d2C = cost_derivatives(Y, Ys)
    return Y, Ys, C, plan, dC, d2C


def test_gradient_matches_finite_differences():
    Y, Ys, _, plan, dC, _ = _problem(0)
    fd = fd_gradient(lambda y: eot_distance(solve_ot(y, Ys, EPS, tol=1e-13)[1]), Y)
    np.testing.assert_allclose(grad_eot(plan, dC), fd, rtol=0, atol=1e-5 * np.abs(fd).max())


def test_implicit_route_agrees_with_envelope_route():
    _, _, _, plan, dC, _ = _problem(1)
    np.testing.assert_allclose(grad_eot_implicit(plan, dC), grad_eot(plan, dC), atol=1e-13)


def test_sinkhorn_gradient_matches_finite_differences():
    Y, Ys, C, plan, dC, _ = _problem(2)

    def loss(y):
        c, p = solve_ot(y, Ys, EPS, tol=1e-13)
        return sinkhorn_distance(c, p)

    fd = fd_gradient(loss, Y)
    np.testing.assert_allclose(grad_sinkhorn(plan, C, dC), fd, atol=1e-4 * np.abs(fd).max())


def test_hessian_matches_finite_differences_and_is_symmetric():
    Y, Ys, _, plan, dC, d2C = _problem(3, m=5, n=5)
    T = hessian_eot(plan, dC, d2C)

    def grad(y):
        p = solve_ot(y, Ys, EPS, tol=1e-13)[1]
        return grad_eot(p, cost_derivatives(y, Ys)[0])

    fd = fd_hessian(grad, Y, FDConfig(h=1e-4))
    np.testing.assert_allclose(T, fd, atol=1e-4 * np.abs(fd).max())
    np.testing.assert_allclose(T, T.transpose(2, 3, 0, 1), atol=1e-12 * np.abs(T).max())


def test_theta_derivatives_match_chain_rule():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((6, 3))
    theta = rng.standard_normal((3, 2))
    Ys = rng.standard_normal((6, 2))
    Y = X @ theta
    _, plan = solve_ot(Y, Ys, 0.5, tol=1e-13)
    dC, d2C = cost_derivatives(Y, Ys)
    g, h, _ = theta_derivatives(plan, X, dC, d2C)
    b = derivative_bundle(plan, dC, d2C)
    g2, h2 = grad_hessian_theta(X, b.grad_Y, b.hessian_Y)
    np.testing.assert_allclose(g, g2, atol=1e-13)
    np.testing.assert_allclose(h, h2, atol=1e-12 * np.abs(h2).max())

    def grad(th):
        yy = X @ th
        return X.T @ grad_eot(solve_ot(yy, Ys, 0.5, tol=1e-13)[1], cost_derivatives(yy, Ys)[0])

    fd = fd_hessian(grad, theta, FDConfig(h=1e-5)).reshape(6, 6)
    np.testing.assert_allclose(h, fd, atol=1e-5 * np.abs(fd).max())


def test_build_H_structure():
    pi = np.array([[0.2, 0.1], [0.3, 0.4]])
    H = build_H(pi)
    np.testing.assert_allclose(H, [[0.3, 0, 0.2, 0.1], [0, 0.7, 0.3, 0.4],
                                   [0.2, 0.3, 0.5, 0], [0.1, 0.4, 0, 0.5]])
    np.testing.assert_allclose(H @ kernel_vector(2, 2), 0.0, atol=1e-16)
    with pytest.raises(ContractError):
        build_H(np.array([[0.5, 0.0], [0.0, 0.5]]))


def test_contracts():
    _, _, C, plan, dC, _ = _problem(5)
    with pytest.raises(ContractError):
        grad_eot(plan, dC[:, :, :-1])
    with pytest.raises(ContractError):
        grad_sinkhorn(plan.coupling, C, dC)  # epsilon missing for a bare coupling
    with pytest.raises(ContractError):
        theta_derivatives(plan, np.ones((2, 2)), dC, dC)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 8), st.sampled_from([0.05, 0.5]))
def test_symmetric_marginal_identity(seed, n, eps):
    Y = np.random.default_rng(seed).uniform(size=(n, 2))
    _, plan = solve_ot(Y, Y, eps, tol=1e-12)
    dC, d2C = cost_derivatives(Y, Y)
    T = hessian_eot(plan, dC, d2C)
    assert marginal_error(T, plan.row_marginal) < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 7), st.integers(2, 7))
def test_gradient_translation_sum(seed, m, n):
    # moving every source point by the same vector changes the cost by 2 (ybar - ystar_bar)
    rng = np.random.default_rng(seed)
    Y, Ys = rng.uniform(size=(m, 2)), rng.uniform(size=(n, 2))
    _, plan = solve_ot(Y, Ys, 0.1, tol=1e-12)
    dC, _ = cost_derivatives(Y, Ys)
    expect = 2.0 * (plan.mu @ Y - plan.nu @ Ys)
    np.testing.assert_allclose(grad_eot(plan, dC).sum(axis=0), expect, atol=1e-9)
