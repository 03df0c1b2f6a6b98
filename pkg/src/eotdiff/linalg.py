"""Dense symmetric eigensolves and the truncated-spectrum linear solve.

Matrices and tensors are plain ``numpy`` float64 arrays.  Tensor index
conventions used throughout the package:

* ``B`` has shape ``(M, d, N)``, ``R`` has shape ``(M + N, M, d)``;
* Hessians w.r.t. source points have shape ``(M, d, M, d)`` and flatten
  ``(k, t) -> k * d + t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ContractError, DegenerateMatrixError, RankZeroError

DEFAULT_ALPHA = 1e-10
SYMMETRY_RTOL = 1e-12


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenpairs of a symmetric matrix, eigenvalues in descending order.

    ``eigenvectors[:, j]`` belongs to ``eigenvalues[j]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


def _as_square_symmetric(H, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or H.shape[0] == 0:
        raise ContractError(f"expected a non-empty square matrix, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise ContractError("matrix has non-finite entries")
    scale = np.max(np.abs(H))
    if np.max(np.abs(H - H.T)) > rtol * max(scale, np.finfo(float).tiny):
        raise ContractError("matrix is not symmetric")
    return H


def sym_eig(H) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix (LAPACK ``syevd``)."""
    H = _as_square_symmetric(H)
    w, q = np.linalg.eigh(H)
    return EigenDecomposition(eigenvalues=w[::-1].copy(), eigenvectors=q[:, ::-1].copy())


def retained_rank(eigenvalues: np.ndarray, alpha: float) -> int:
    """Number of leading eigenvalues with ``lambda_j / lambda_1 > alpha``.

    ``alpha == 0`` selects the unregularized mode: every eigenvalue above
    the machine-zero level ``n * eps * lambda_1`` is kept, which is what a
    plain least-squares solver with default cutoff does.
    """
    lam1 = eigenvalues[0]
    if not lam1 > 0:
        raise DegenerateMatrixError(f"largest eigenvalue {lam1!r} is not positive")
    if alpha == 0:
        cutoff = eigenvalues.size * np.finfo(np.float64).eps
    else:
        cutoff = alpha
    k = int(np.count_nonzero(eigenvalues / lam1 > cutoff))
    if k == 0:
        raise RankZeroError("no eigenvalue survives truncation")
    return k


def tsvd_solve(
    H,
    rhs,
    alpha: float = DEFAULT_ALPHA,
    eig: Optional[EigenDecomposition] = None,
) -> Tuple[np.ndarray, int]:
    """Solve ``H x = rhs`` on the leading eigenspace of a symmetric PSD ``H``.

    Returns ``(U_K diag(1/lambda_K) U_K^T rhs, K)`` where ``K`` counts the
    eigenvalues with ``lambda_j / lambda_1 > alpha``.  ``rhs`` may carry any
    number of trailing dimensions; the solve is applied slice-wise.  Pass a
    precomputed ``eig`` to reuse one decomposition across calls.
    """
    if not (alpha == 0 or 0 < alpha < 1):
        raise ContractError(f"alpha must lie in (0, 1) or be 0, got {alpha!r}")
    if eig is None:
        eig = sym_eig(H)
    n = eig.eigenvalues.size
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.ndim == 0 or rhs.shape[0] != n:
        raise ContractError(f"rhs leading dimension {rhs.shape[:1]} does not match {n}")
    k = retained_rank(eig.eigenvalues, alpha)
    u = eig.eigenvectors[:, :k]
    flat = rhs.reshape(n, -1)
    coeff = (u.T @ flat) / eig.eigenvalues[:k, None]
    return (u @ coeff).reshape(rhs.shape), k
