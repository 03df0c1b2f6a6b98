"""Entropic optimal transport with analytic first and second derivatives."""

from __future__ import annotations

__version__ = "0.1.0"

from .derivatives import (
    DerivativeBundle,
    build_H,
    derivative_bundle,
    grad_eot,
    grad_eot_implicit,
    grad_sinkhorn,
    hessian_eot,
    marginal_error,
    theta_derivatives,
)
from .errors import (
    BoundInapplicableError,
    ContractError,
    DegenerateMatrixError,
    RankZeroError,
    SinkhornNumericalError,
    SizeLimitError,
)
from .linalg import EigenDecomposition, sym_eig, tsvd_solve
from .optimize import (
    FitConfig,
    FitResult,
    RegressionProblem,
    fit_two_stage,
    gd_baseline,
    make_gaussian_mixture_problem,
    make_registration_problem,
)
from .sinkhorn import (
    CostModel,
    PointCloud,
    TransportPlan,
    cost_matrix,
    eot_distance,
    sinkhorn_distance,
    sinkhorn_log,
    sinkhorn_stabilized,
    solve_ot,
)
from .spectral import SpectralReport, circle_oracle, condition_bounds, h_spectrum, perturbation_bound

__all__ = [
    "BoundInapplicableError", "ContractError", "CostModel", "DegenerateMatrixError",
    "DerivativeBundle", "EigenDecomposition", "FitConfig", "FitResult", "PointCloud",
    "RankZeroError", "RegressionProblem", "SinkhornNumericalError", "SizeLimitError",
    "SpectralReport", "TransportPlan", "build_H", "circle_oracle", "condition_bounds",
    "cost_matrix", "derivative_bundle", "eot_distance", "fit_two_stage", "gd_baseline",
    "grad_eot", "grad_eot_implicit", "grad_sinkhorn", "h_spectrum", "hessian_eot",
    "make_gaussian_mixture_problem", "make_registration_problem", "marginal_error",
    "perturbation_bound", "sinkhorn_distance", "sinkhorn_log", "sinkhorn_stabilized",
    "solve_ot", "sym_eig", "theta_derivatives", "tsvd_solve",
]
