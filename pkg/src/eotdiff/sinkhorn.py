"""Cost matrices and log-domain Sinkhorn iterations for entropic OT.

Potentials follow the convention

    Pi_ij = mu_i * nu_j * exp((f_i + g_j - C_ij) / epsilon)

so that the entropic cost (KL taken against ``mu x nu``) is ``mu @ f + nu @ g``.
All reductions run serially through numpy in a fixed order, so results are
bit-reproducible for identical inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .errors import ContractError, SinkhornNumericalError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 100_000
WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class PointCloud:
    """Points (``M x d``) with strictly positive probability weights."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if pts.ndim != 2 or pts.shape[0] != w.size:
            raise ContractError(f"{pts.shape[0]} points but {w.size} weights")
        if not np.all(np.isfinite(pts)):
            raise ContractError("point coordinates must be finite")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ContractError("weights must be positive and sum to one")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "PointCloud":
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        m = pts.shape[0]
        return cls(pts, np.full(m, 1.0 / m))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class CostModel:
    """Ground cost ``c(y, y*)``.  Only the squared Euclidean cost is built in."""

    kind: str = "squared_euclidean"

    def __post_init__(self):
        if self.kind != "squared_euclidean":
            raise ContractError(f"unsupported cost model {self.kind!r}")

    def matrix(self, Y: np.ndarray, Ystar: np.ndarray) -> np.ndarray:
        return cdist(Y, Ystar, "sqeuclidean")

    def first_derivative(self, Y: np.ndarray, Ystar: np.ndarray) -> np.ndarray:
        # dC[k, s, j] = d C_kj / d (y_k)_s
        return 2.0 * (Y[:, :, None] - Ystar.T[None, :, :])

    def second_derivative(self, Y: np.ndarray, Ystar: np.ndarray) -> np.ndarray:
        # read-only broadcast view; every (k, j) block is 2 I_d
        m, d = Y.shape
        block = 2.0 * np.eye(d)
        return np.broadcast_to(block, (m, Ystar.shape[0], d, d))


SQUARED_EUCLIDEAN = CostModel()

ArrayOrCloud = Union[np.ndarray, PointCloud]


def _points(cloud: ArrayOrCloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2:
        raise ContractError(f"expected an (n, d) array of points, got shape {pts.shape}")
    return pts


def _check_dims(Y: np.ndarray, Ystar: np.ndarray) -> None:
    if Y.shape[1] != Ystar.shape[1]:
        raise ContractError(
            f"ambient dimensions differ: {Y.shape[1]} vs {Ystar.shape[1]}"
        )


def cost_matrix(Y: ArrayOrCloud, Ystar: ArrayOrCloud, model: CostModel = SQUARED_EUCLIDEAN) -> np.ndarray:
    """``C_ij = c(y_i, y*_j)``."""
    Y, Ystar = _points(Y), _points(Ystar)
    _check_dims(Y, Ystar)
    return model.matrix(Y, Ystar)


def cost_derivatives(
    Y: ArrayOrCloud, Ystar: ArrayOrCloud, model: CostModel = SQUARED_EUCLIDEAN
) -> Tuple[np.ndarray, np.ndarray]:
    """First derivatives ``(M, d, N)`` and second-derivative blocks ``(M, N, d, d)``.

    Only derivatives with respect to the source point ``y_k`` of ``C_kj`` are
    returned; ``C_ij`` does not depend on ``y_k`` for ``i != k``.
    """
    Y, Ystar = _points(Y), _points(Ystar)
    _check_dims(Y, Ystar)
    return model.first_derivative(Y, Ystar), model.second_derivative(Y, Ystar)


@dataclass(frozen=True)
class TransportPlan:
    """Output of :func:`sinkhorn_log`.

    ``marginal_violation`` is ``|Pi 1 - mu|_1 + |Pi^T 1 - nu|_1`` measured on
    the stored coupling; ``residuals`` holds the per-iteration violation
    estimates used by the stopping test.
    """

    coupling: np.ndarray
    f: np.ndarray
    g: np.ndarray
    epsilon: float
    iterations: int
    marginal_violation: float
    mu: np.ndarray
    nu: np.ndarray
    converged: bool = True
    residuals: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    @property
    def not_converged(self) -> bool:
        return not self.converged

    @property
    def row_marginal(self) -> np.ndarray:
        return self.coupling.sum(axis=1)

    @property
    def col_marginal(self) -> np.ndarray:
        return self.coupling.sum(axis=0)


def _lse_rows(A: np.ndarray) -> np.ndarray:
    m = A.max(axis=1)
    return m + np.log(np.exp(A - m[:, None]).sum(axis=1))


def _as_weights(w, n: int, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size != n:
        raise ContractError(f"{name} has length {w.size}, expected {n}")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ContractError(f"{name} must be strictly positive and finite")
    return w


def gibbs_coupling(C: np.ndarray, f, g, mu, nu, epsilon: float) -> np.ndarray:
    """``mu_i nu_j exp((f_i + g_j - C_ij) / epsilon)`` evaluated in log space."""
    log_pi = (
        np.log(mu)[:, None]
        + np.log(nu)[None, :]
        + (np.asarray(f)[:, None] + np.asarray(g)[None, :] - C) / epsilon
    )
    return np.exp(log_pi)


def sinkhorn_log(
    C,
    mu,
    nu,
    epsilon: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init_g: Optional[np.ndarray] = None,
    symmetric: Optional[bool] = None,
) -> TransportPlan:
    """Log-domain Sinkhorn with a 1-norm marginal-violation stopping rule.

    Alternates ``f <- -eps * LSE_j(log nu_j + (g_j - C_ij)/eps)`` and the
    symmetric ``g`` update, starting from ``g = init_g`` (zeros by default).
    Every log-sum-exp subtracts the running row (column) maximum, so the
    Gibbs kernel ``exp(-C/eps)`` is never formed.

    For symmetric problems (``C == C.T`` and ``mu == nu``, detected exactly
    when ``symmetric`` is None) the averaged update ``f <- (f + T f) / 2``
    with ``g = f`` is used instead.  Its linearization has spectrum in
    ``[0, 1/2]`` because the Gibbs kernel of the squared distance is positive
    semidefinite, so it does not stall on the slow modes that make plain
    alternation crawl at small ``eps``.  The fixed point is the same.

    Returns the first iterate whose violation is ``<= tol``; after
    ``max_iter`` iterations the last iterate is returned with
    ``converged=False``.  Raises :class:`SinkhornNumericalError` if the
    potentials stop being finite.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ContractError("cost matrix has non-finite entries")
    if not epsilon > 0:
        raise ContractError(f"epsilon must be positive, got {epsilon!r}")
    if not tol > 0:
        raise ContractError(f"tol must be positive, got {tol!r}")
    if max_iter < 1:
        raise ContractError("max_iter must be at least 1")
    m, n = C.shape
    mu = _as_weights(mu, m, "mu")
    nu = _as_weights(nu, n, "nu")
    eps = float(epsilon)
    log_mu, log_nu = np.log(mu), np.log(nu)
    neg_c = -C / eps
    neg_ct = np.ascontiguousarray(neg_c.T)

    def f_update(g):
        return -eps * _lse_rows(neg_c + (log_nu + g / eps)[None, :])

    def g_update(f):
        return -eps * _lse_rows(neg_ct + (log_mu + f / eps)[None, :])

    g = np.zeros(n) if init_g is None else np.array(init_g, dtype=np.float64)
    if g.shape != (n,):
        raise ContractError(f"init_g must have shape ({n},)")
    if symmetric is None:
        symmetric = m == n and np.array_equal(C, C.T) and np.array_equal(mu, nu)
    elif symmetric and not (m == n and np.array_equal(C, C.T) and np.array_equal(mu, nu)):
        raise ContractError("symmetric mode needs a symmetric cost and equal marginals")
    if symmetric:
        return _sinkhorn_symmetric(C, neg_c, mu, eps, tol, max_iter, g)
    f = f_update(g)
    residuals = []
    for it in range(1, max_iter + 1):
        g = g_update(f)
        f_next = f_update(g)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(f_next))):
            raise SinkhornNumericalError(f"non-finite potentials at iteration {it}")
        # columns are exact after the g update; row sums are mu * exp((f - f_next)/eps)
        with np.errstate(over="ignore"):
            est = float(np.sum(mu * np.abs(np.expm1((f - f_next) / eps))))
        residuals.append(est)
        if est <= tol or it == max_iter:
            plan = _make_plan(C, f, g, mu, nu, eps, it, residuals, converged=False)
            if plan.marginal_violation <= tol:
                return replace(plan, converged=True)
            if it == max_iter:
                logger.warning(
                    "sinkhorn stopped at max_iter=%d with violation %.3e", max_iter,
                    plan.marginal_violation,
                )
                return plan
        f = f_next
    raise AssertionError("unreachable")


def _sinkhorn_symmetric(C, neg_c, mu, eps, tol, max_iter, f) -> TransportPlan:
    log_mu = np.log(mu)
    residuals = []
    for it in range(1, max_iter + 1):
        tf = -eps * _lse_rows(neg_c + (log_mu + f / eps)[None, :])
        f = 0.5 * (f + tf)
        if not np.all(np.isfinite(f)):
            raise SinkhornNumericalError(f"non-finite potentials at iteration {it}")
        tf = -eps * _lse_rows(neg_c + (log_mu + f / eps)[None, :])
        # row and column sums coincide: mu * exp((f - T f) / eps)
        with np.errstate(over="ignore"):
            est = float(2.0 * np.sum(mu * np.abs(np.expm1((f - tf) / eps))))
        residuals.append(est)
        if est <= tol or it == max_iter:
            plan = _make_plan(C, f, f, mu, mu, eps, it, residuals, converged=False)
            if plan.marginal_violation <= tol:
                return replace(plan, converged=True)
            if it == max_iter:
                logger.warning(
                    "sinkhorn stopped at max_iter=%d with violation %.3e", max_iter,
                    plan.marginal_violation,
                )
                return plan
    raise AssertionError("unreachable")


def _make_plan(C, f, g, mu, nu, eps, it, residuals, converged) -> TransportPlan:
    pi = gibbs_coupling(C, f, g, mu, nu, eps)
    viol = float(np.abs(pi.sum(axis=1) - mu).sum() + np.abs(pi.sum(axis=0) - nu).sum())
    return TransportPlan(
        coupling=pi, f=f.copy(), g=g.copy(), epsilon=eps, iterations=it,
        marginal_violation=viol, mu=mu, nu=nu, converged=converged,
        residuals=np.asarray(residuals),
    )


ABSORB_LIMIT = 1e50
_TINY = 1e-280


def sinkhorn_stabilized(
    C,
    mu,
    nu,
    epsilon: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init_g: Optional[np.ndarray] = None,
    warn: bool = True,
) -> TransportPlan:
    """Sinkhorn with scalings on an absorbed kernel; same fixed point as :func:`sinkhorn_log`.

    Iterates ``a, b`` on ``K_ij = mu_i nu_j exp((f_i + g_j - C_ij)/eps)``,
    where ``f, g`` are the absorbed potentials, and folds ``eps log a`` and
    ``eps log b`` back into them once a scaling leaves ``[1e-50, 1e50]``.
    Each half-step is then a matrix-vector product instead of a full
    exponential.  If a kernel row or column underflows entirely, that
    half-step is redone in the log domain.  Stopping rule and outputs match
    :func:`sinkhorn_log`.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or not np.all(np.isfinite(C)):
        raise ContractError("cost matrix must be a finite 2-D array")
    if not epsilon > 0 or not tol > 0 or max_iter < 1:
        raise ContractError("need epsilon > 0, tol > 0 and max_iter >= 1")
    m, n = C.shape
    mu = _as_weights(mu, m, "mu")
    nu = _as_weights(nu, n, "nu")
    eps = float(epsilon)
    log_mu, log_nu = np.log(mu), np.log(nu)
    neg_c = -C / eps
    neg_ct = np.ascontiguousarray(neg_c.T)
    g = np.zeros(n) if init_g is None else np.array(init_g, dtype=np.float64)
    if g.shape != (n,):
        raise ContractError(f"init_g must have shape ({n},)")
    def f_update(g):
        return -eps * _lse_rows(neg_c + (log_nu + g / eps)[None, :])

    f = f_update(g)
    K = gibbs_coupling(C, f, g, mu, nu, eps)
    a, b = np.ones(m), np.ones(n)
    residuals = []
    for it in range(1, max_iter + 1):
        s = K.T @ a
        if np.all(s > _TINY):
            b = nu / s
        else:
            f = f + eps * np.log(a)
            g = -eps * _lse_rows(neg_ct + (log_mu + f / eps)[None, :])
            K = gibbs_coupling(C, f, g, mu, nu, eps)
            a, b = np.ones(m), np.ones(n)
        t = K @ b
        in_kernel = bool(np.all(t > _TINY))
        if in_kernel:
            est = float(np.sum(np.abs(a * t - mu)))
        else:
            f, g = f + eps * np.log(a), g + eps * np.log(b)
            a, b = np.ones(m), np.ones(n)
            f_new = f_update(g)
            with np.errstate(over="ignore"):
                est = float(np.sum(mu * np.abs(np.expm1((f - f_new) / eps))))
        if not np.isfinite(est) and in_kernel:
            raise SinkhornNumericalError(f"non-finite scalings at iteration {it}")
        residuals.append(est)
        if est <= tol or it == max_iter:
            plan = _make_plan(
                C, f + eps * np.log(a), g + eps * np.log(b), mu, nu, eps, it, residuals,
                converged=False,
            )
            if plan.marginal_violation <= tol:
                return replace(plan, converged=True)
            if it == max_iter:
                if warn:
                    logger.warning(
                        "sinkhorn stopped at max_iter=%d with violation %.3e", max_iter,
                        plan.marginal_violation,
                    )
                return plan
        if not in_kernel:
            f = f_new
            K = gibbs_coupling(C, f, g, mu, nu, eps)
            continue
        a = mu / t
        if max(a.max(), b.max()) > ABSORB_LIMIT or min(a.min(), b.min()) < 1.0 / ABSORB_LIMIT:
            f, g = f + eps * np.log(a), g + eps * np.log(b)
            K = gibbs_coupling(C, f, g, mu, nu, eps)
            a, b = np.ones(m), np.ones(n)
    raise AssertionError("unreachable")


NEWTON_SWITCH = 200
NEWTON_MAX_STEPS = 60
_ARMIJO = 0.25


def _dual_value(C, f, g, mu, nu, eps) -> float:
    with np.errstate(over="ignore"):
        mass = gibbs_coupling(C, f, g, mu, nu, eps).sum()
    return float(mu @ f + nu @ g - eps * mass)


def _newton_direction(pi: np.ndarray, r: np.ndarray) -> Optional[np.ndarray]:
    """Solve ``H x = r`` with the kernel direction ``(1, -1)`` lifted out of the null space."""
    m, n = pi.shape
    q = np.concatenate([np.ones(m), -np.ones(n)])
    H = np.zeros((m + n, m + n))
    H[:m, m:] = pi
    H[m:, :m] = pi.T
    H[np.arange(m), np.arange(m)] = pi.sum(axis=1)
    H[np.arange(m, m + n), np.arange(m, m + n)] = pi.sum(axis=0)
    H += np.outer(q, q) * (2.0 / (m + n) ** 2)
    # a tiny ridge keeps the factorization defined when Gibbs entries underflow;
    # any positive definite system still gives an ascent direction
    H[np.diag_indices(m + n)] += 1e-12 * H.diagonal().max()
    try:
        factor = cho_factor(H, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    x = cho_solve(factor, r, check_finite=False)
    return x if np.all(np.isfinite(x)) else None


def sinkhorn_newton(
    C,
    mu,
    nu,
    epsilon: float,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init_g: Optional[np.ndarray] = None,
    switch_iter: int = NEWTON_SWITCH,
) -> TransportPlan:
    """Stabilized Sinkhorn, then Newton ascent on the dual if it has not converged.

    The dual ``mu @ f + nu @ g - eps * sum(Pi)`` has gradient equal to the
    marginal residual and Hessian ``-H(Pi) / eps``, so once Sinkhorn slows
    down each Newton step costs one Cholesky factorization of size
    ``M + N``.  Steps use Armijo backtracking; if a step cannot be found the
    remaining budget goes back to Sinkhorn.  The fixed point and stopping
    rule are those of :func:`sinkhorn_log`, and ``iterations`` counts
    Sinkhorn sweeps plus Newton steps.
    """
    first = min(switch_iter, max_iter)
    plan = sinkhorn_stabilized(C, mu, nu, epsilon, tol, first, init_g, warn=False)
    if plan.converged or first == max_iter:
        if not plan.converged:
            logger.warning("sinkhorn stopped at max_iter=%d with violation %.3e", max_iter,
                           plan.marginal_violation)
        return plan
    C = np.asarray(C, dtype=np.float64)
    mu, nu, eps = plan.mu, plan.nu, plan.epsilon
    m = mu.size
    f, g, pi = plan.f.copy(), plan.g.copy(), plan.coupling
    residuals = list(plan.residuals)
    it = plan.iterations
    for _ in range(NEWTON_MAX_STEPS):
        if it >= max_iter:
            break
        r = np.concatenate([mu - pi.sum(axis=1), nu - pi.sum(axis=0)])
        x = _newton_direction(pi, r)
        if x is None:
            break
        x *= eps
        slope = float(r @ x)
        base = mu @ f + nu @ g - eps * pi.sum()
        step = 1.0
        while step > 1e-10:
            if _dual_value(C, f + step * x[:m], g + step * x[m:], mu, nu, eps) >= base + _ARMIJO * step * slope:
                break
            step *= 0.5
        else:
            break
        f, g = f + step * x[:m], g + step * x[m:]
        it += 1
        cand = _make_plan(C, f, g, mu, nu, eps, it, residuals, converged=False)
        residuals.append(cand.marginal_violation)
        pi = cand.coupling
        if cand.marginal_violation <= tol:
            return replace(cand, converged=True, residuals=np.asarray(residuals))
    rest = max_iter - it
    if rest < 1:
        plan = _make_plan(C, f, g, mu, nu, eps, it, residuals, converged=False)
        logger.warning("sinkhorn stopped at max_iter=%d with violation %.3e", max_iter,
                       plan.marginal_violation)
        return plan
    tail = sinkhorn_stabilized(C, mu, nu, eps, tol, rest, init_g=g)
    return replace(tail, iterations=it + tail.iterations,
                   residuals=np.concatenate([residuals, tail.residuals]))


def eot_distance(plan: TransportPlan, mu=None, nu=None) -> float:
    """Entropic OT cost as the dual value ``mu @ f + nu @ g``."""
    mu = plan.mu if mu is None else np.asarray(mu, dtype=np.float64)
    nu = plan.nu if nu is None else np.asarray(nu, dtype=np.float64)
    return float(mu @ plan.f + nu @ plan.g)


def sinkhorn_distance(C, plan: TransportPlan) -> float:
    """Transport cost of the entropic plan, ``sum_ij C_ij Pi_ij``."""
    return float(np.sum(np.asarray(C) * plan.coupling))


def solve_ot(
    Y: ArrayOrCloud,
    Ystar: ArrayOrCloud,
    epsilon: float,
    mu=None,
    nu=None,
    model: CostModel = SQUARED_EUCLIDEAN,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    init_g: Optional[np.ndarray] = None,
    symmetric: Optional[bool] = None,
) -> Tuple[np.ndarray, TransportPlan]:
    """Build the cost matrix between two clouds and run :func:`sinkhorn_log`.

    Weights default to those of a :class:`PointCloud`, or uniform for arrays.
    """
    if mu is None:
        mu = Y.weights if isinstance(Y, PointCloud) else None
    if nu is None:
        nu = Ystar.weights if isinstance(Ystar, PointCloud) else None
    Yp, Ysp = _points(Y), _points(Ystar)
    C = cost_matrix(Yp, Ysp, model)
    m, n = C.shape
    mu = np.full(m, 1.0 / m) if mu is None else mu
    nu = np.full(n, 1.0 / n) if nu is None else nu
    return C, sinkhorn_log(C, mu, nu, epsilon, tol=tol, max_iter=max_iter, init_g=init_g,
        symmetric=symmetric,
    )
