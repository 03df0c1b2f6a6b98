"""Independent verification oracles: finite differences and a dense pseudo-inverse.

Nothing in the production code paths calls into this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, SizeLimitError

PINV_SIZE_CAP = 200
PINV_RTOL = 1e-12


@dataclass(frozen=True)
class FDConfig:
    """Central-difference settings.

    With ``richardson`` set, two step sizes ``h`` and ``h/2`` are combined
    to cancel the leading ``O(h^2)`` error term.
    """

    h: float = 1e-5
    scheme: str = "central"
    richardson: bool = False

    def __post_init__(self):
        if not self.h > 0:
            raise ContractError(f"step must be positive, got {self.h!r}")
        if self.scheme != "central":
            raise ContractError(f"unsupported scheme {self.scheme!r}")


def _central(fn: Callable[[np.ndarray], np.ndarray], Y: np.ndarray, h: float) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    out = None
    for idx in np.ndindex(*Y.shape):
        yp = Y.copy()
        ym = Y.copy()
        yp[idx] += h
        ym[idx] -= h
        fp = np.asarray(fn(yp), dtype=np.float64)
        fm = np.asarray(fn(ym), dtype=np.float64)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"non-finite evaluation at coordinate {idx}")
        if out is None:
            out = np.empty(Y.shape + fp.shape)
        out[idx] = (fp - fm) / (2.0 * h)
    return out


def _differentiate(fn, Y, cfg: FDConfig) -> np.ndarray:
    coarse = _central(fn, Y, cfg.h)
    if not cfg.richardson:
        return coarse
    fine = _central(fn, Y, cfg.h / 2.0)
    return (4.0 * fine - coarse) / 3.0


def fd_gradient(loss: Callable[[np.ndarray], float], Y, cfg: FDConfig = FDConfig()) -> np.ndarray:
    """Central-difference gradient of a scalar function, same shape as ``Y``."""
    return _differentiate(loss, Y, cfg)


def fd_hessian(grad: Callable[[np.ndarray], np.ndarray], Y, cfg: FDConfig = FDConfig(h=1e-4)) -> np.ndarray:
    """Central differences of an analytic gradient.

    For ``Y`` of shape ``(M, d)`` the result has shape ``(M, d, M, d)`` with
    entry ``[k, t, s, l] = d grad[s, l] / d Y[k, t]``.
    """
    return _differentiate(grad, Y, cfg)


def dense_pinv_apply(H, rhs) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of symmetric ``H`` applied to ``rhs``.

    Built from a full SVD, a route independent of the eigen-solver used in
    production, with singular values below ``1e-12 * sigma_1`` treated as zero.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {H.shape}")
    n = H.shape[0]
    if n > PINV_SIZE_CAP:
        raise SizeLimitError(f"dense pseudo-inverse is capped at size {PINV_SIZE_CAP}, got {n}")
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[0] != n:
        raise ContractError("rhs leading dimension does not match H")
    u, s, vt = np.linalg.svd(H)
    keep = s > PINV_RTOL * s[0]
    flat = rhs.reshape(n, -1)
    sol = vt[keep].T @ ((u[:, keep].T @ flat) / s[keep, None])
    return sol.reshape(rhs.shape)
