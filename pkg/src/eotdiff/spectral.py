"""Spectrum and conditioning of the H-matrix.

Covers the generic spectral report, the closed-form spectrum for couplings
with uniform marginals, condition-number and perturbation bounds, and the
closed-form oracle for equally spaced points on the unit circle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .derivatives import h_matrix, kernel_vector
from .errors import BoundInapplicableError, ContractError
from .linalg import EigenDecomposition, sym_eig
from .sinkhorn import TransportPlan

ZERO_RTOL = 1e-12
UNIFORM_TOL = 1e-10

CouplingLike = Union[TransportPlan, np.ndarray]


def _nonnegative_coupling(plan: CouplingLike) -> np.ndarray:
    pi = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    if pi.ndim != 2 or pi.size == 0:
        raise ContractError(f"coupling must be a non-empty 2-D array, got shape {pi.shape}")
    if not np.all(np.isfinite(pi)) or np.any(pi < 0):
        raise ContractError("coupling entries must be finite and nonnegative")
    if np.any(pi.sum(axis=1) <= 0) or np.any(pi.sum(axis=0) <= 0):
        raise ContractError("coupling has an empty row or column")
    return pi


@dataclass(frozen=True)
class SpectralReport:
    """Eigen-summary of ``H(Pi)``.

    ``condition_number`` is ``lambda_1 / lambda_{M+N-1}`` and is ``inf``
    whenever that eigenvalue falls under the zero threshold, i.e. whenever
    the kernel is not simple.
    """

    eigenvalues: np.ndarray
    lambda_min_positive: float
    condition_number: float
    kernel_residual: float
    zero_multiplicity: int

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def kernel_is_simple(self) -> bool:
        return self.zero_multiplicity == 1


def h_spectrum(plan: CouplingLike, eig: EigenDecomposition | None = None) -> SpectralReport:
    """Spectral report of ``H(Pi)`` built from the coupling's own marginals.

    Nonnegative couplings without empty rows or columns are accepted so that
    permutation couplings can be analysed; the simple-kernel guarantee only
    holds for strictly positive ones.
    """
    pi = _nonnegative_coupling(plan)
    m, n = pi.shape
    H = h_matrix(pi)
    if eig is None:
        eig = sym_eig(H)
    lam = eig.eigenvalues
    lam1 = float(lam[0])
    zero_mult = int(np.count_nonzero(lam <= ZERO_RTOL * lam1))
    lam_pos = float(lam[-2]) if lam.size > 1 else 0.0
    kappa = lam1 / lam_pos if lam_pos > ZERO_RTOL * lam1 else math.inf
    q0 = kernel_vector(m, n)
    return SpectralReport(
        eigenvalues=lam.copy(),
        lambda_min_positive=lam_pos,
        condition_number=kappa,
        kernel_residual=float(np.linalg.norm(H @ q0)),
        zero_multiplicity=zero_mult,
    )


def check_uniform_marginals(pi: np.ndarray, tol: float = UNIFORM_TOL) -> None:
    m, n = pi.shape
    row_err = np.max(np.abs(pi.sum(axis=1) - 1.0 / m))
    col_err = np.max(np.abs(pi.sum(axis=0) - 1.0 / n))
    if max(row_err, col_err) > tol:
        raise ContractError(
            f"marginals are not uniform (max deviation {max(row_err, col_err):.3e})"
        )


def _kappa_scalars(sigma: np.ndarray, m: int, n: int) -> np.ndarray:
    a = (1.0 / m - 1.0 / n) / (2.0 * sigma)
    return a + np.sqrt(a * a + 1.0)


def eig_from_singular(plan: CouplingLike, return_vectors: bool = False):
    """Spectrum of ``H(Pi)`` assembled from the singular values of ``Pi``.

    Requires uniform marginals and full rank ``min(M, N)``.  When
    ``M > N`` the transpose is used; ``H`` of the transpose is a symmetric
    permutation of ``H``, so the eigenvalues agree, and eigenvectors are
    mapped back to the original ordering.  Returns the descending
    eigenvalues, or an :class:`EigenDecomposition` if ``return_vectors``.
    """
    pi = _nonnegative_coupling(plan)
    check_uniform_marginals(pi)
    transposed = pi.shape[0] > pi.shape[1]
    work = pi.T if transposed else pi
    m, n = work.shape
    u, sigma, vt = np.linalg.svd(work)
    if sigma[-1] <= ZERO_RTOL * sigma[0]:
        raise ContractError(f"coupling has rank below {m}")
    a, b = 1.0 / m, 1.0 / n
    root = np.sqrt((a - b) ** 2 + 4.0 * sigma ** 2)
    upper = 0.5 * ((a + b) + root)
    lower = 0.5 * ((a + b) - root)
    lam = np.concatenate([upper, np.full(n - m, b), lower[::-1]])
    if not return_vectors:
        return lam
    kap = _kappa_scalars(sigma, m, n)
    norm = np.sqrt(1.0 + kap ** 2)
    v = vt.T
    top = np.vstack([u * (kap / norm), v[:, :m] / norm])
    mid = np.vstack([np.zeros((m, n - m)), v[:, m:]])
    bot = np.vstack([-u / norm, v[:, :m] * (kap / norm)])[:, ::-1]
    q = np.hstack([top, mid, bot])
    if transposed:
        q = np.vstack([q[m:], q[:m]])
    return EigenDecomposition(eigenvalues=lam, eigenvectors=q)


def _gap(sigma1: float, sigma2: float) -> float:
    if not sigma1 > sigma2 >= 0:
        raise ContractError(f"need sigma1 > sigma2 >= 0, got {sigma1!r}, {sigma2!r}")
    return sigma1 * sigma1 - sigma2 * sigma2


def condition_bounds(sigma1: float, sigma2: float, M: int, N: int) -> Tuple[float, float]:
    """Lower and upper bounds on ``kappa(H)`` for uniform-marginal couplings."""
    lower = (M + N) ** 2 / (2.0 * M * M * N * N * _gap(sigma1, sigma2))
    return lower, 2.0 * lower


def perturbation_bound(
    delta: float, delta2: float, sigma1: float, sigma2: float, M: int, N: int,
) -> Tuple[float, float, float]:
    """Eigenvalue-shift bound and condition-number bracket for a perturbed coupling.

    ``delta`` bounds the entrywise marginal deviation and ``delta2`` the
    Frobenius distance to the optimal coupling whose top singular values are
    ``sigma1``, ``sigma2``.  Raises :class:`BoundInapplicableError` when the
    perturbation is too large for the bracket to apply.
    """
    if delta < 0 or delta2 < 0:
        raise ContractError("perturbation sizes must be nonnegative")
    gap = _gap(sigma1, sigma2)
    h = M * N / (M + N)
    shift = delta + delta2
    t = shift / (h * gap)
    if t >= 1:
        raise BoundInapplicableError(f"perturbation ratio t={t:.3g} is not below 1")
    big_delta = h * h * gap
    lower = (1.0 - t * big_delta) / ((2.0 + t) * big_delta)
    upper = (1.0 + t * big_delta) / ((1.0 - t) * big_delta)
    return shift, lower, upper


def perturbation_sizes(pi_hat: np.ndarray, pi_star: np.ndarray) -> Tuple[float, float]:
    """Measured ``(delta, delta2)``: max marginal deviation and Frobenius distance."""
    pi_hat = np.asarray(pi_hat, dtype=np.float64)
    m, n = pi_hat.shape
    delta = max(
        np.max(np.abs(pi_hat.sum(axis=1) - 1.0 / m)),
        np.max(np.abs(pi_hat.sum(axis=0) - 1.0 / n)),
    )
    return float(delta), float(np.linalg.norm(pi_hat - pi_star))


def normalized_top_eig(plan: CouplingLike) -> Tuple[float, np.ndarray]:
    """Largest eigenpair of ``diag(nu)^-1 Pi^T diag(mu)^-1 Pi`` (marginals from ``Pi``).

    Computed through the symmetric similar matrix; the eigenvector is scaled
    so that its entries sum to ``N``.
    """
    pi = _nonnegative_coupling(plan)
    mu, nu = pi.sum(axis=1), pi.sum(axis=0)
    s = pi / np.sqrt(mu)[:, None] / np.sqrt(nu)[None, :]
    w, q = np.linalg.eigh(s.T @ s)
    vec = q[:, -1] / np.sqrt(nu)
    vec = vec * (nu.size / vec.sum())
    return float(w[-1]), vec


def reduced_system(plan: CouplingLike) -> np.ndarray:
    """``diag(nu_bar) - Pi_bar^T diag(mu)^-1 Pi_bar`` with the last column of ``Pi`` dropped.

    Invertible for positive couplings; provided for analysis only, the
    solvers use the truncated eigen-solve instead.
    """
    pi = _nonnegative_coupling(plan)
    mu, nu = pi.sum(axis=1), pi.sum(axis=0)
    bar = pi[:, :-1]
    return np.diag(nu[:-1]) - bar.T @ (bar / mu[:, None])


@dataclass(frozen=True)
class CircleOracle:
    """Closed forms for ``N`` equally spaced unit-circle points with uniform weights."""

    N: int
    epsilon: float
    gibbs_eigs: Tuple[float, float]
    coupling: np.ndarray
    lambda_min_positive: float
    condition_number: float
    r_N_eps: float


def circle_points(N: int) -> np.ndarray:
    x = 2.0 * np.pi * np.arange(N) / N
    return np.column_stack([np.cos(x), np.sin(x)])


def _circle_weights(N: int, epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    j = np.arange(N)
    half = np.sin(np.pi * j / N) ** 2
    # squared chord lengths 4 sin^2(pi j / N); the j = 0 term is exp(0) = 1,
    # so the sums below can never underflow as a whole
    return np.exp(-4.0 * half / epsilon), half


def circle_oracle(N: int, epsilon: float) -> CircleOracle:
    """All quantities from circulant sums, without running Sinkhorn."""
    if N < 3:
        raise ContractError("circle oracle needs N >= 3")
    if not epsilon > 0:
        raise ContractError(f"epsilon must be positive, got {epsilon!r}")
    w, half = _circle_weights(N, epsilon)
    j = np.arange(N)
    lam1 = float(w.sum())
    lam2 = float(np.sum(w * np.cos(2.0 * np.pi * j / N)))
    # 1/N - lam2/(lam1 N) written without cancellation: 1 - cos(2x) = 2 sin^2(x)
    lam_min = float(np.sum(w * 2.0 * half) / lam1 / N)
    idx = (j[None, :] - j[:, None]) % N
    coupling = w[idx] / (lam1 * N)
    r = math.exp(-4.0 * math.sin(math.pi / N) ** 2 / epsilon) / N ** 2
    return CircleOracle(
        N=N, epsilon=float(epsilon), gibbs_eigs=(lam1, lam2), coupling=coupling,
        lambda_min_positive=lam_min, condition_number=(2.0 / N) / lam_min, r_N_eps=r,
    )


@dataclass(frozen=True)
class AsymptoticRates:
    pred_large_N: float
    pred_small_eps: float
    regime: str


REGIME_BAND = 2.0


def asymptotic_rates(N: int, epsilon: float) -> AsymptoticRates:
    """Limit predictions for ``lambda_{2N-1}`` and the regime they apply to.

    The two thresholds ``N > 2 pi / sqrt(eps)`` and ``eps < 4 pi^2 / N^2``
    are complementary, so a band of a factor ``REGIME_BAND`` around
    ``rho = N sqrt(eps) / (2 pi) = 1`` is tagged ``transitional``.
    """
    if N < 3 or not epsilon > 0:
        raise ContractError("need N >= 3 and epsilon > 0")
    r = math.exp(-4.0 * math.sin(math.pi / N) ** 2 / epsilon) / N ** 2
    rho = N * math.sqrt(epsilon) / (2.0 * math.pi)
    if rho > REGIME_BAND:
        regime = "large_N"
    elif rho < 1.0 / REGIME_BAND:
        regime = "small_eps"
    else:
        regime = "transitional"
    return AsymptoticRates(
        pred_large_N=epsilon / (4.0 * N), pred_small_eps=4.0 * math.pi ** 2 * r / N, regime=regime,
    )
