"""Exception types raised across the package."""


class ContractError(ValueError):
    """An input violates a documented precondition (shape, symmetry, sign)."""


class DegenerateMatrixError(ContractError):
    """The largest eigenvalue of a matrix that must be PSD is not positive."""


class RankZeroError(ContractError):
    """Truncation removed the whole spectrum."""


class BoundInapplicableError(ContractError):
    """A perturbation bound was requested outside its validity range."""


class SizeLimitError(ContractError):
    """A dense oracle was asked to handle a matrix above its size cap."""


class SinkhornNumericalError(FloatingPointError):
    """Sinkhorn potentials became NaN or infinite."""
