"""Analytic first and second derivatives of entropic OT costs w.r.t. source points.

Every routine works from the coupling alone and recomputes the marginals
``Pi 1`` and ``Pi^T 1`` from it, so early-stopped Sinkhorn plans give exact
derivatives of the entropic cost for their own marginals.

Index conventions: ``dC`` and ``B`` are ``(M, d, N)``; ``R`` is
``(M + N, M, d)``; the Hessian ``T`` is ``(M, d, M, d)`` and flattens with
``(k, t) -> k * d + t``.  Parameter Hessians flatten ``theta`` (``D x d``)
with ``(m, t) -> m * d + t``, i.e. C order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .errors import ContractError
from .linalg import DEFAULT_ALPHA, EigenDecomposition, sym_eig, tsvd_solve
from .sinkhorn import TransportPlan

CouplingLike = Union[TransportPlan, np.ndarray]


def _coupling(plan: CouplingLike) -> np.ndarray:
    pi = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    if pi.ndim != 2:
        raise ContractError(f"coupling must be 2-D, got shape {pi.shape}")
    return pi


def _epsilon(plan: CouplingLike, epsilon: Optional[float]) -> float:
    if epsilon is None:
        if not isinstance(plan, TransportPlan):
            raise ContractError("epsilon is required when passing a bare coupling")
        epsilon = plan.epsilon
    if not epsilon > 0:
        raise ContractError(f"epsilon must be positive, got {epsilon!r}")
    return float(epsilon)


def h_matrix(pi: np.ndarray) -> np.ndarray:
    """``[[diag(Pi 1), Pi], [Pi^T, diag(Pi^T 1)]]`` without sign checks."""
    m, n = pi.shape
    H = np.zeros((m + n, m + n))
    H[:m, m:] = pi
    H[m:, :m] = pi.T
    idx = np.arange(m + n)
    H[idx[:m], idx[:m]] = pi.sum(axis=1)
    H[idx[m:], idx[m:]] = pi.sum(axis=0)
    return H


def build_H(plan: CouplingLike) -> np.ndarray:
    """H-matrix of a coupling, built from its own marginals.

    Bare arrays must be strictly positive.  Solver plans are positive in
    exact arithmetic, so Gibbs entries that underflowed to zero are accepted
    for them as long as no row or column is empty.
    """
    pi = _coupling(plan)
    if isinstance(plan, TransportPlan):
        if np.any(pi < 0) or np.any(pi.sum(axis=1) <= 0) or np.any(pi.sum(axis=0) <= 0):
            raise ContractError("coupling has negative entries or an empty row or column")
    elif not np.all(pi > 0):
        raise ContractError("coupling must be entrywise positive")
    return h_matrix(pi)


def kernel_vector(m: int, n: int) -> np.ndarray:
    """``(1_M, -1_N)``, the null vector of every H-matrix."""
    return np.concatenate([np.ones(m), -np.ones(n)])


def build_B_R(plan: CouplingLike, dC: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """``B_ksj = dC_ksj Pi_kj`` and ``R = [diag(B 1_N); B^T]``."""
    pi = _coupling(plan)
    dC = np.asarray(dC, dtype=np.float64)
    m, n = pi.shape
    if dC.ndim != 3 or dC.shape[0] != m or dC.shape[2] != n:
        raise ContractError(f"dC shape {dC.shape} inconsistent with coupling {pi.shape}")
    d = dC.shape[1]
    B = dC * pi[:, None, :]
    R = np.zeros((m + n, m, d))
    R[np.arange(m), np.arange(m), :] = B.sum(axis=2)
    R[m:] = B.transpose(2, 0, 1)
    return B, R


def grad_eot(plan: CouplingLike, dC: np.ndarray) -> np.ndarray:
    """Gradient of the entropic cost: row ``k`` is ``sum_j dC_kj Pi_kj``."""
    pi = _coupling(plan)
    dC = np.asarray(dC, dtype=np.float64)
    if dC.ndim != 3 or dC.shape[0] != pi.shape[0] or dC.shape[2] != pi.shape[1]:
        raise ContractError(f"dC shape {dC.shape} inconsistent with coupling {pi.shape}")
    return np.einsum("ksj,kj->ks", dC, pi)


def dual_jacobian(
    plan: CouplingLike, dC: np.ndarray, alpha: float = DEFAULT_ALPHA,
    eig: Optional[EigenDecomposition] = None,
) -> Tuple[np.ndarray, int]:
    """Truncated solution of ``H [df/dY; dg/dY] = R``, shape ``(M + N, M, d)``."""
    H = build_H(plan)
    _, R = build_B_R(plan, dC)
    return tsvd_solve(H, R, alpha, eig=eig)


def grad_eot_implicit(plan: CouplingLike, dC: np.ndarray, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Gradient via implicit differentiation of the potentials.

    Contracts the dual Jacobian with ``(Pi 1, Pi^T 1)``; agrees with
    :func:`grad_eot` because that weight vector lies in the range of ``H``.
    """
    pi = _coupling(plan)
    jac, _ = dual_jacobian(plan, dC, alpha)
    w = np.concatenate([pi.sum(axis=1), pi.sum(axis=0)])
    return np.einsum("i,ikt->kt", w, jac)


def grad_sinkhorn(
    plan: CouplingLike, C: np.ndarray, dC: np.ndarray, alpha: float = DEFAULT_ALPHA,
    epsilon: Optional[float] = None,
) -> np.ndarray:
    """Gradient of ``sum_ij C_ij Pi_ij`` where ``Pi`` is the entropic plan.

    Needs one ``(M + N)``-vector solve ``H r = (a; b)`` with row and column
    sums of ``C * Pi``; the result does not depend on the kernel component
    of ``r`` since every slice of ``R`` is orthogonal to ``(1, -1)``.
    """
    pi = _coupling(plan)
    eps = _epsilon(plan, epsilon)
    C = np.asarray(C, dtype=np.float64)
    if C.shape != pi.shape:
        raise ContractError("cost matrix and coupling shapes differ")
    B, R = build_B_R(pi, dC)
    cp = C * pi
    rhs = np.concatenate([cp.sum(axis=1), cp.sum(axis=0)])
    r, _ = tsvd_solve(build_H(plan), rhs, alpha)
    direct = np.einsum("ksj,kj->ks", B, 1.0 - C / eps)
    return direct + np.einsum("i,ikt->kt", r, R) / eps


def e_blocks(plan: CouplingLike, dC: np.ndarray, d2C: np.ndarray, epsilon: Optional[float] = None) -> np.ndarray:
    """Diagonal blocks ``(M, d, d)`` of the explicit Hessian term.

    ``E_k = sum_j Pi_kj (d2C_kj - dC_kj dC_kj^T / eps)``; off-diagonal blocks vanish.
    """
    pi = _coupling(plan)
    eps = _epsilon(plan, epsilon)
    curv = np.einsum("kj,kjtl->ktl", pi, d2C)
    outer = np.einsum("ktj,klj,kj->ktl", dC, dC, pi)
    return curv - outer / eps


def blocks_to_tensor(blocks: np.ndarray) -> np.ndarray:
    """Block-diagonal ``(M, d, M, d)`` tensor from ``(M, d, d)`` blocks."""
    m, d, _ = blocks.shape
    T = np.zeros((m, d, m, d))
    idx = np.arange(m)
    T[idx, :, idx, :] = blocks
    return T


@dataclass(frozen=True)
class DerivativeBundle:
    """Gradient and Hessian w.r.t. source points with their intermediates."""

    grad_Y: np.ndarray
    hessian_Y: np.ndarray
    B: np.ndarray
    R: np.ndarray
    E: np.ndarray
    retained_rank: int


def derivative_bundle(
    plan: CouplingLike, dC: np.ndarray, d2C: np.ndarray,
    epsilon: Optional[float] = None, alpha: float = DEFAULT_ALPHA,
    eig: Optional[EigenDecomposition] = None,
) -> DerivativeBundle:
    """Gradient and Hessian of the entropic cost in one pass.

    The Hessian is ``(1/eps) R^T S + E`` with ``S`` the truncated solve of
    ``H S = R``, evaluated as a single matrix product over the flattened
    ``(k, t)`` and ``(s, l)`` indices.  No pseudo-inverse is formed.
    """
    pi = _coupling(plan)
    eps = _epsilon(plan, epsilon)
    m, n = pi.shape
    B, R = build_B_R(pi, dC)
    d = B.shape[1]
    H = build_H(plan)
    if eig is None:
        eig = sym_eig(H)
    S, k = tsvd_solve(H, R, alpha, eig=eig)
    rf = R.reshape(m + n, m * d)
    T = (rf.T @ S.reshape(m + n, m * d) / eps).reshape(m, d, m, d)
    E = blocks_to_tensor(e_blocks(pi, dC, d2C, eps))
    return DerivativeBundle(
        grad_Y=B.sum(axis=2), hessian_Y=T + E, B=B, R=R, E=E, retained_rank=k,
    )


def hessian_eot(
    plan: CouplingLike, dC: np.ndarray, d2C: np.ndarray,
    epsilon: Optional[float] = None, alpha: float = DEFAULT_ALPHA,
) -> np.ndarray:
    """Hessian tensor ``(M, d, M, d)`` of the entropic cost w.r.t. source points."""
    return derivative_bundle(plan, dC, d2C, epsilon, alpha).hessian_Y


def marginal_error(T: np.ndarray, mu) -> float:
    """Squared deviation of ``sum_k T[k, :, s, :]`` from ``2 mu_s I_d``, summed over ``s``.

    Only meaningful for the squared Euclidean cost.
    """
    T = np.asarray(T, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    m, d = T.shape[:2]
    summed = T.sum(axis=0)  # (t, s, l)
    target = 2.0 * mu[None, :, None] * np.eye(d)[:, None, :]
    return float(np.sum((summed - target) ** 2))


def grad_hessian_theta(X: np.ndarray, grad_Y: np.ndarray, T: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Chain rule through the linear model ``Y = X theta``.

    ``hess[(m, t), (n, l)] = sum_{k, s} X_km T_ktsl X_sn``; the second-order
    term of the chain rule vanishes for a linear map.
    """
    X = np.asarray(X, dtype=np.float64)
    m_pts, D = X.shape
    if grad_Y.shape[0] != m_pts or T.shape[0] != m_pts or T.shape[2] != m_pts:
        raise ContractError("X rows must match the number of source points")
    d = grad_Y.shape[1]
    grad_theta = X.T @ grad_Y
    hess = np.einsum("km,ktsl,sn->mtnl", X, T, X, optimize=True)
    return grad_theta, hess.reshape(D * d, D * d)


def theta_derivatives(
    plan: CouplingLike, X: np.ndarray, dC: np.ndarray, d2C: np.ndarray,
    epsilon: Optional[float] = None, alpha: float = DEFAULT_ALPHA,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Gradient ``(D, d)`` and flattened Hessian ``(D d, D d)`` in ``theta``.

    Same quantities as :func:`grad_hessian_theta` applied to
    :func:`derivative_bundle`, but contracts ``R`` with ``X`` before the
    solve so the ``(M d)^2`` tensor is never formed.
    """
    pi = _coupling(plan)
    eps = _epsilon(plan, epsilon)
    X = np.asarray(X, dtype=np.float64)
    m, n = pi.shape
    if X.shape[0] != m:
        raise ContractError("X rows must match the number of source points")
    D = X.shape[1]
    B, R = build_B_R(pi, dC)
    d = B.shape[1]
    grad_Y = B.sum(axis=2)
    Rx = np.einsum("ikt,km->imt", R, X, optimize=True).reshape(m + n, D * d)
    S, k = tsvd_solve(build_H(plan), Rx, alpha)
    hess = Rx.T @ S / eps
    blocks = e_blocks(pi, dC, d2C, eps)
    hess = hess + np.einsum("km,ktl,kn->mtnl", X, blocks, X, optimize=True).reshape(D * d, D * d)
    # exact in theory; rounding in the truncated solve leaves a small asymmetry
    return X.T @ grad_Y, 0.5 * (hess + hess.T), k
