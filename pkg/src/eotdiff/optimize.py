"""Two-stage SGD then relaxed-Newton fitting of linear models ``Y = X theta``.

The loss is the entropic OT cost between the model outputs ``X theta`` (with
uniform weights) and a target cloud whose row order carries no information.
``theta`` is ``D x d``; gradients keep that shape and Hessians are flattened
``(m, t) -> m * d + t``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .derivatives import grad_eot, theta_derivatives
from .errors import ContractError, SinkhornNumericalError
from .linalg import DEFAULT_ALPHA, tsvd_solve
from .sinkhorn import (
    DEFAULT_MAX_ITER,
    SQUARED_EUCLIDEAN,
    CostModel,
    TransportPlan,
    cost_derivatives,
    cost_matrix,
    eot_distance,
    sinkhorn_newton,
)

logger = logging.getLogger(__name__)

NEWTON_RTOL = 1e-12


@dataclass(frozen=True)
class RegressionProblem:
    """Shuffled-regression instance: features ``X``, unpaired targets ``Ystar``."""

    X: np.ndarray
    Ystar: np.ndarray
    epsilon: float = 0.05
    cost: CostModel = SQUARED_EUCLIDEAN
    true_theta: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        Ys = np.atleast_2d(np.asarray(self.Ystar, dtype=np.float64))
        if X.ndim != 2 or Ys.ndim != 2 or X.shape[0] < 1 or Ys.shape[0] < 1:
            raise ContractError("X and Ystar must be non-empty 2-D arrays")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Ys))):
            raise ContractError("X and Ystar must be finite")
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon!r}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Ystar", Ys)
        if self.true_theta is not None:
            th = np.asarray(self.true_theta, dtype=np.float64)
            if th.shape != self.theta_shape:
                raise ContractError(f"true_theta must have shape {self.theta_shape}")
            object.__setattr__(self, "true_theta", th)

    @property
    def theta_shape(self) -> Tuple[int, int]:
        return self.X.shape[1], self.Ystar.shape[1]

    def theta_error(self, theta: np.ndarray) -> float:
        """Frobenius distance to ``true_theta`` (``nan`` when unknown)."""
        if self.true_theta is None:
            return math.nan
        return float(np.linalg.norm(theta - self.true_theta))


@dataclass(frozen=True)
class FitConfig:
    """Settings of the two-stage fit; ``max_epochs`` bounds SGD steps."""

    sgd_lr: float = 0.001
    batch_size: int = 100
    max_epochs: int = 50
    newton_lr: float = 0.5
    newton_max_iter: int = 30
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = DEFAULT_MAX_ITER
    alpha: float = DEFAULT_ALPHA
    pd_check_period: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.sgd_lr > 0 and self.newton_lr > 0):
            raise ContractError("learning rates must be positive")
        if self.newton_lr > 1:
            raise ContractError("relaxed Newton needs newton_lr <= 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.newton_max_iter < 0:
            raise ContractError("batch_size must be >= 1 and iteration caps >= 0")
        if self.pd_check_period < 1:
            raise ContractError("pd_check_period must be >= 1")
        if not self.sinkhorn_tol > 0:
            raise ContractError("sinkhorn_tol must be positive")

    @classmethod
    def from_mapping(cls, values: dict) -> "FitConfig":
        """Build from string or typed values, rejecting unknown keys."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ContractError(f"unknown FitConfig key {key!r}")
            conv = int if types[key] in ("int", int) else float
            try:
                kwargs[key] = conv(raw)
            except (TypeError, ValueError):
                raise ContractError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)


@dataclass
class FitResult:
    """Outcome of a fit.

    ``loss_trace`` holds full-batch losses: the starting point, then one
    entry per SGD step at which the PD test ran, then one per accepted Newton
    step.  A Newton step that fails to improve the loss ends the run; its loss
    is kept in ``rejected_loss`` and ``theta_hat`` stays at the best iterate.
    """

    theta_hat: np.ndarray
    loss_trace: List[float]
    stage_switch_iter: int
    newton_iters: int
    grad_norm_final: float
    theta_error: float
    switched: bool = False
    theta_error_trace: List[float] = field(default_factory=list)
    stage_trace: List[str] = field(default_factory=list)
    min_hessian_eig_at_switch: float = math.nan
    rejected_loss: float = math.nan
    pd_fallbacks: int = 0
    diverged: bool = False
    sgd_steps: int = 0


@dataclass
class _Eval:
    loss: float
    plan: TransportPlan
    grad: np.ndarray
    hess: Optional[np.ndarray] = None


class _Objective:
    """Full-batch loss with warm-started Sinkhorn; owns no randomness."""

    def __init__(self, problem: RegressionProblem, config: FitConfig):
        self.p = problem
        self.cfg = config
        self.g = None
        n = problem.Ystar.shape[0]
        self.nu = np.full(n, 1.0 / n)

    def plan(self, X: np.ndarray, theta: np.ndarray) -> Tuple[np.ndarray, TransportPlan]:
        Y = X @ theta
        C = cost_matrix(Y, self.p.Ystar, self.p.cost)
        m = X.shape[0]
        plan = sinkhorn_newton(
            C, np.full(m, 1.0 / m), self.nu, self.p.epsilon, tol=self.cfg.sinkhorn_tol,
            max_iter=self.cfg.sinkhorn_max_iter, init_g=self.g,
        )
        self.g = plan.g
        return Y, plan

    def evaluate(self, theta: np.ndarray, hessian: bool = False, X: Optional[np.ndarray] = None) -> _Eval:
        X = self.p.X if X is None else X
        Y, plan = self.plan(X, theta)
        dC, d2C = cost_derivatives(Y, self.p.Ystar, self.p.cost)
        loss = eot_distance(plan)
        if hessian:
            grad, hess, _ = theta_derivatives(plan, X, dC, d2C, self.p.epsilon, self.cfg.alpha)
        else:
            grad, hess = X.T @ grad_eot(plan, dC), None
        return _Eval(loss=loss, plan=plan, grad=grad, hess=hess)


def _min_eig(hess: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (hess + hess.T))[0])


def _sgd_step(obj: _Objective, theta: np.ndarray, rng: np.random.Generator, config: FitConfig) -> np.ndarray:
    X = obj.p.X
    n_s = min(config.batch_size, X.shape[0])
    rows = np.sort(rng.choice(X.shape[0], size=n_s, replace=False))
    sub = X[rows]
    g_full = obj.g
    ev = obj.evaluate(theta, X=sub)
    obj.g = g_full if g_full is not None else obj.g
    return theta - config.sgd_lr * ev.grad


def sgd_stage(
    problem: RegressionProblem, theta0, config: FitConfig = FitConfig(),
    _obj: Optional[_Objective] = None, _rng: Optional[np.random.Generator] = None,
) -> FitResult:
    """Minibatch SGD until the full-batch ``theta``-Hessian is positive definite.

    Each step samples ``batch_size`` rows of ``X`` without replacement and
    uses uniform weights on the minibatch against the full target cloud.
    The PD test runs after every ``pd_check_period`` steps; the result's
    ``switched`` flag records whether it ever passed.
    """
    if config.batch_size > problem.X.shape[0]:
        raise ContractError("batch_size exceeds the number of source rows")
    obj = _obj if _obj is not None else _Objective(problem, config)
    rng = _rng if _rng is not None else np.random.default_rng(config.rng_seed)
    theta = np.array(theta0, dtype=np.float64).reshape(problem.theta_shape)
    ev = obj.evaluate(theta)
    result = FitResult(
        theta_hat=theta, loss_trace=[ev.loss], stage_switch_iter=-1, newton_iters=0,
        grad_norm_final=float(np.linalg.norm(ev.grad)), theta_error=problem.theta_error(theta),
        theta_error_trace=[problem.theta_error(theta)], stage_trace=["start"],
    )
    for step in range(1, config.max_epochs + 1):
        theta = _sgd_step(obj, theta, rng, config)
        if not np.all(np.isfinite(theta)):
            raise SinkhornNumericalError(f"SGD produced non-finite parameters at step {step}")
        result.sgd_steps = step
        if step % config.pd_check_period:
            continue
        ev = obj.evaluate(theta, hessian=True)
        lam_min = _min_eig(ev.hess)
        result.loss_trace.append(ev.loss)
        result.theta_error_trace.append(problem.theta_error(theta))
        result.stage_trace.append("sgd")
        result.grad_norm_final = float(np.linalg.norm(ev.grad))
        if lam_min > 0:
            result.switched = True
            result.stage_switch_iter = step
            result.min_hessian_eig_at_switch = lam_min
            break
    result.theta_hat = theta
    result.theta_error = problem.theta_error(theta)
    return result


def newton_stage(
    problem: RegressionProblem, theta_hat, config: FitConfig = FitConfig(),
    _obj: Optional[_Objective] = None, _rng: Optional[np.random.Generator] = None,
    _result: Optional[FitResult] = None,
) -> FitResult:
    """Relaxed Newton steps ``theta <- theta - r_n H^-1 grad`` on the full batch.

    Stops when a step lowers the loss by less than a relative ``1e-12``, or
    after ``newton_max_iter`` steps.  If the Hessian is not positive definite
    at the current iterate, one SGD step is taken instead and the test is
    repeated at the next iteration.
    """
    obj = _obj if _obj is not None else _Objective(problem, config)
    rng = _rng if _rng is not None else np.random.default_rng(config.rng_seed)
    theta = np.array(theta_hat, dtype=np.float64).reshape(problem.theta_shape)
    ev = obj.evaluate(theta, hessian=True)
    if _result is None:
        result = FitResult(
            theta_hat=theta, loss_trace=[ev.loss], stage_switch_iter=0, newton_iters=0,
            grad_norm_final=float(np.linalg.norm(ev.grad)), theta_error=problem.theta_error(theta),
            theta_error_trace=[problem.theta_error(theta)], stage_trace=["start"],
        )
    else:
        result = _result
    shape = problem.theta_shape
    for _ in range(config.newton_max_iter):
        if _min_eig(ev.hess) <= 0:
            result.pd_fallbacks += 1
            theta = _sgd_step(obj, theta, rng, config)
            ev = obj.evaluate(theta, hessian=True)
            result.loss_trace.append(ev.loss)
            result.theta_error_trace.append(problem.theta_error(theta))
            result.stage_trace.append("sgd-fallback")
            continue
        step, _ = tsvd_solve(ev.hess, ev.grad.reshape(-1), config.alpha)
        trial = theta - config.newton_lr * step.reshape(shape)
        result.newton_iters += 1
        trial_ev = obj.evaluate(trial, hessian=True)
        if not np.isfinite(trial_ev.loss) or trial_ev.loss > ev.loss - NEWTON_RTOL * abs(ev.loss):
            result.rejected_loss = float(trial_ev.loss)
            obj.g = ev.plan.g
            break
        theta, ev = trial, trial_ev
        result.loss_trace.append(ev.loss)
        result.theta_error_trace.append(problem.theta_error(theta))
        result.stage_trace.append("newton")
    result.theta_hat = theta
    result.grad_norm_final = float(np.linalg.norm(ev.grad))
    result.theta_error = problem.theta_error(theta)
    return result


def fit_two_stage(problem: RegressionProblem, theta0, config: FitConfig = FitConfig()) -> FitResult:
    """SGD until the Hessian is positive definite, then relaxed Newton.

    If SGD never reaches a positive definite Hessian the Newton stage still
    runs and handles indefinite Hessians through its SGD fallback.
    """
    obj = _Objective(problem, config)
    rng = np.random.default_rng(config.rng_seed)
    result = sgd_stage(problem, theta0, config, _obj=obj, _rng=rng)
    if not result.switched:
        logger.warning("SGD stage ended after %d steps without a PD Hessian", result.sgd_steps)
    return newton_stage(problem, result.theta_hat, config, _obj=obj, _rng=rng, _result=result)


def gd_baseline(problem: RegressionProblem, theta0, lr: float = 0.001, iters: int = 2000,
                config: FitConfig = FitConfig()) -> FitResult:
    """Plain full-batch gradient descent, for comparison traces."""
    if lr < 0 or iters < 0:
        raise ContractError("lr and iters must be nonnegative")
    obj = _Objective(problem, config)
    theta = np.array(theta0, dtype=np.float64).reshape(problem.theta_shape)
    ev = obj.evaluate(theta)
    result = FitResult(
        theta_hat=theta, loss_trace=[ev.loss], stage_switch_iter=-1, newton_iters=0,
        grad_norm_final=float(np.linalg.norm(ev.grad)), theta_error=problem.theta_error(theta),
        theta_error_trace=[problem.theta_error(theta)], stage_trace=["start"],
    )
    for _ in range(iters):
        new_theta = theta - lr * ev.grad
        try:
            new_ev = obj.evaluate(new_theta)
        except (SinkhornNumericalError, FloatingPointError):
            result.diverged = True
            break
        if not (np.isfinite(new_ev.loss) and np.all(np.isfinite(new_theta))):
            result.diverged = True
            break
        theta, ev = new_theta, new_ev
        result.loss_trace.append(ev.loss)
        result.theta_error_trace.append(problem.theta_error(theta))
        result.stage_trace.append("gd")
    result.theta_hat = theta
    result.grad_norm_final = float(np.linalg.norm(ev.grad))
    result.theta_error = problem.theta_error(theta)
    return result


MIXTURE_STDS = (0.3, 0.05, 0.6)


def make_gaussian_mixture_problem(
    seed: int = 0, n: int = 500, D: int = 5, d: int = 2, noise_var: float = 0.04,
    epsilon: float = 0.05, centre_scale: float = 1.0,
) -> Tuple[RegressionProblem, np.ndarray]:
    """Three-cluster Gaussian-mixture features, ``Y* = X theta* + xi`` with rows shuffled.

    Cluster centres are standard normal in ``R^D`` and points are assigned
    to clusters uniformly at random.  Returns the problem and a standard
    normal starting point drawn from the same seeded stream.
    """
    rng = np.random.default_rng(seed)
    centres = centre_scale * rng.standard_normal((3, D))
    labels = rng.integers(0, 3, size=n)
    stds = np.asarray(MIXTURE_STDS)[labels]
    X = centres[labels] + stds[:, None] * rng.standard_normal((n, D))
    theta_star = rng.standard_normal((D, d))
    Ystar = X @ theta_star + math.sqrt(noise_var) * rng.standard_normal((n, d))
    Ystar = Ystar[rng.permutation(n)]
    theta0 = rng.standard_normal((D, d))
    return RegressionProblem(X, Ystar, epsilon=epsilon, true_theta=theta_star), theta0


def load_point_cloud(path, columns: Optional[int] = 3) -> np.ndarray:
    """Numeric text with one point per row, separated by whitespace or commas.

    Blank lines and ``#`` comments are skipped.
    """
    rows = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.replace(",", " ").split()])
        except ValueError:
            raise ContractError(f"{path}:{lineno}: non-numeric entry") from None
    if not rows:
        raise ContractError(f"{path}: no points found")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ContractError(f"{path}: rows have differing column counts {sorted(widths)}")
    pts = np.asarray(rows, dtype=np.float64)
    if columns is not None and pts.shape[1] != columns:
        raise ContractError(f"{path}: expected {columns} columns, got {pts.shape[1]}")
    if not np.all(np.isfinite(pts)):
        raise ContractError(f"{path}: non-finite coordinates")
    return pts


def synthetic_room(rng: np.random.Generator, sizes=(500, 1500, 1500)) -> np.ndarray:
    """Three box-shaped clusters standing in for a chair, a desk and a sofa."""
    boxes = (
        (np.array([-0.6, -0.5, 0.0]), np.array([0.25, 0.25, 0.5])),
        (np.array([0.3, -0.4, 0.2]), np.array([0.7, 0.35, 0.05])),
        (np.array([0.0, 0.55, 0.1]), np.array([0.9, 0.2, 0.3])),
    )
    parts = []
    for (centre, half), count in zip(boxes, sizes):
        parts.append(centre + half * rng.uniform(-1.0, 1.0, size=(count, 3)))
    return np.vstack(parts)


def make_registration_problem(
    seed: int = 0, source=None, sizes=(500, 1500, 1500), noise_var: float = 4e-4,
    epsilon: float = 0.01, scale: Optional[float] = None, rotation: Optional[np.ndarray] = None,
) -> Tuple[RegressionProblem, np.ndarray]:
    """Rotated, scaled, noisy and shuffled copy of a 3-D cloud.

    ``source`` may be an array, a path to a point-cloud file, or None for the
    synthetic three-cluster room.  Unless given, the rotation is uniform on
    SO(3) and the scale log-uniform on ``[0.5, 2]``.  Returns the problem and
    a start ``theta* + N(0, I)``.
    """
    rng = np.random.default_rng(seed)
    if source is None:
        X = synthetic_room(rng, sizes)
    elif isinstance(source, (str, Path)):
        X = load_point_cloud(source, columns=3)
    else:
        X = np.asarray(source, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != 3:
            raise ContractError("registration source must have 3 columns")
    rot = Rotation.random(random_state=rng).as_matrix() if rotation is None else np.asarray(rotation, dtype=np.float64)
    s = math.exp(rng.uniform(math.log(0.5), math.log(2.0))) if scale is None else float(scale)
    theta_star = s * rot
    n = X.shape[0]
    Ystar = X @ theta_star + math.sqrt(noise_var) * rng.standard_normal((n, 3))
    Ystar = Ystar[rng.permutation(n)]
    theta0 = theta_star + rng.standard_normal((3, 3))
    return RegressionProblem(X, Ystar, epsilon=epsilon, true_theta=theta_star), theta0
