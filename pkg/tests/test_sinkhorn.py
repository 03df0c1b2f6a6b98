from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eotdiff import ContractError, PointCloud, eot_distance, sinkhorn_distance, solve_ot
from eotdiff.sinkhorn import (
    cost_derivatives,
    cost_matrix,
    gibbs_coupling,
    sinkhorn_log,
    sinkhorn_newton,
    sinkhorn_stabilized,
)

# 40-digit log-domain iterations (mpmath) on the fixture below
Y3 = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
YS3 = np.array([[0.5, 0.5], [1.5, 1.0], [-0.5, 1.0]])
MU3 = np.full(3, 1.0 / 3.0)
NU3 = np.array([0.2, 0.3, 0.5])
OT3 = 1.4204616860446143834
SD3 = 1.1696843798849550734
P3_00 = 0.13492706100876615291


def _violation(plan):
    return np.abs(plan.row_marginal - plan.mu).sum() + np.abs(plan.col_marginal - plan.nu).sum()


def test_high_precision_reference():
    C, plan = solve_ot(Y3, YS3, 0.5, MU3, NU3, tol=1e-14)
    np.testing.assert_allclose(eot_distance(plan), OT3, rtol=1e-13)
    np.testing.assert_allclose(sinkhorn_distance(C, plan), SD3, rtol=1e-13)
    np.testing.assert_allclose(plan.coupling[0, 0], P3_00, rtol=1e-13)


def test_stabilized_matches_log_domain():
    rng = np.random.default_rng(3)
    Y, Ys = rng.uniform(size=(30, 2)), rng.uniform(size=(40, 2))
    C = cost_matrix(Y, Ys)
    mu, nu = np.full(30, 1 / 30), np.full(40, 1 / 40)
    for eps in (0.5, 0.01):
        a = sinkhorn_log(C, mu, nu, eps, tol=1e-12)
        b = sinkhorn_stabilized(C, mu, nu, eps, tol=1e-12)
        np.testing.assert_allclose(b.coupling, a.coupling, atol=1e-12)
        np.testing.assert_allclose(eot_distance(b), eot_distance(a), rtol=1e-11)


def test_newton_polish_matches_log_domain():
    rng = np.random.default_rng(5)
    Y, Ys = rng.uniform(size=(40, 2)), rng.uniform(size=(50, 2))
    C = cost_matrix(Y, Ys)
    mu, nu = np.full(40, 1 / 40), np.full(50, 1 / 50)
    a = sinkhorn_log(C, mu, nu, 0.002, tol=1e-12)
    b = sinkhorn_newton(C, mu, nu, 0.002, tol=1e-12, switch_iter=50)
    assert b.converged and b.iterations < a.iterations
    np.testing.assert_allclose(b.coupling, a.coupling, atol=1e-12)
    np.testing.assert_allclose(eot_distance(b), eot_distance(a), rtol=1e-10)


def test_newton_polish_respects_iteration_budget():
    rng = np.random.default_rng(6)
    C = cost_matrix(rng.uniform(size=(30, 2)), rng.uniform(size=(30, 2)))
    w = np.full(30, 1 / 30)
    plan = sinkhorn_newton(C, w, w, 0.001, tol=1e-14, max_iter=12, switch_iter=10)
    assert plan.iterations <= 12


def test_symmetric_mode_matches_alternation():
    rng = np.random.default_rng(4)
    Y = rng.uniform(size=(12, 2))
    C = cost_matrix(Y, Y)
    mu = np.full(12, 1 / 12)
    sym = sinkhorn_log(C, mu, mu, 0.1, tol=1e-12)
    alt = sinkhorn_log(C, mu, mu, 0.1, tol=1e-12, symmetric=False)
    np.testing.assert_array_equal(sym.f, sym.g)
    np.testing.assert_allclose(sym.coupling, alt.coupling, atol=1e-12)
    np.testing.assert_allclose(sym.coupling, sym.coupling.T, atol=0)


def test_symmetric_flag_on_asymmetric_problem():
    C = cost_matrix(Y3, YS3)
    with pytest.raises(ContractError):
        sinkhorn_log(C, MU3, NU3, 0.5, symmetric=True)


def test_small_eps_self_transport_converges():
    Y = np.random.default_rng(0).uniform(size=(10, 2))
    _, plan = solve_ot(Y, Y, 0.005)
    assert plan.converged
    assert plan.marginal_violation <= 1e-9


def test_max_iter_reports_nonconvergence():
    rng = np.random.default_rng(1)
    _, plan = solve_ot(rng.uniform(size=(20, 2)), rng.uniform(size=(20, 2)), 0.01, max_iter=2)
    assert not plan.converged
    assert plan.iterations == 2


def test_gibbs_coupling_formula():
    C = cost_matrix(Y3, YS3)
    f, g = np.array([0.1, -0.2, 0.3]), np.array([0.0, 0.5, -0.1])
    expect = MU3[:, None] * NU3[None, :] * np.exp((f[:, None] + g[None, :] - C) / 0.7)
    np.testing.assert_allclose(gibbs_coupling(C, f, g, MU3, NU3, 0.7), expect, rtol=1e-15)


def test_cost_derivatives_shapes_and_values():
    dC, d2C = cost_derivatives(Y3, YS3)
    assert dC.shape == (3, 2, 3) and d2C.shape == (3, 3, 2, 2)
    np.testing.assert_allclose(dC[1, :, 2], 2 * (Y3[1] - YS3[2]))
    np.testing.assert_array_equal(d2C[0, 1], 2 * np.eye(2))


@pytest.mark.parametrize("bad", [
    dict(mu=np.array([0.5, 0.5, 0.0])),
    dict(mu=np.array([0.5, 0.5])),
    dict(epsilon=0.0),
    dict(epsilon=-1.0),
])
def test_input_contracts(bad):
    C = cost_matrix(Y3, YS3)
    kwargs = dict(mu=MU3, nu=NU3, epsilon=0.5)
    kwargs.update(bad)
    with pytest.raises(ContractError):
        sinkhorn_log(C, kwargs["mu"], kwargs["nu"], kwargs["epsilon"])


def test_point_cloud_contracts():
    with pytest.raises(ContractError):
        PointCloud(np.zeros((2, 2)), np.array([0.7, 0.7]))
    with pytest.raises(ContractError):
        PointCloud(np.array([[np.nan, 0.0]]), np.array([1.0]))
    with pytest.raises(ContractError):
        cost_matrix(np.zeros((2, 2)), np.zeros((2, 3)))
    cloud = PointCloud.uniform(Y3)
    assert cloud.size == 3 and cloud.dim == 2


clouds = st.integers(min_value=2, max_value=8).flatmap(
    lambda m: st.tuples(st.just(m), st.integers(min_value=2, max_value=8), st.integers(0, 2**32 - 1))
)


@settings(max_examples=30, deadline=None)
@given(clouds, st.sampled_from([0.05, 0.2, 1.0]))
def test_plan_invariants(shape, eps):
    m, n, seed = shape
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0.5, 1.5, m)
    nu = rng.uniform(0.5, 1.5, n)
    C, plan = solve_ot(rng.uniform(size=(m, 2)), rng.uniform(size=(n, 2)), eps,
                       mu / mu.sum(), nu / nu.sum())
    assert plan.converged
    assert np.all(plan.coupling >= 0)
    assert _violation(plan) <= 1e-9
    np.testing.assert_allclose(plan.marginal_violation, _violation(plan), atol=1e-15)
    np.testing.assert_allclose(plan.coupling, gibbs_coupling(C, plan.f, plan.g, plan.mu, plan.nu, eps),
                               rtol=1e-12)
    # the dual value exceeds the transport cost by eps times the (nonnegative) KL term
    assert eot_distance(plan) >= sinkhorn_distance(C, plan) - 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
def test_translation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    Y, Ys = rng.uniform(size=(5, 2)), rng.uniform(size=(6, 2))
    _, a = solve_ot(Y, Ys, 0.1, tol=1e-12)
    _, b = solve_ot(Y + shift, Ys + shift, 0.1, tol=1e-12)
    np.testing.assert_allclose(eot_distance(a), eot_distance(b), rtol=1e-9, atol=1e-12)
