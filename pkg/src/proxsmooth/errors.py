"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class DomainError(ValueError):
    """An input lies outside the domain of an operation (e.g. non-PD covariance)."""


class NotIntegrableError(DomainError):
    """An exponentiated quadratic has a curvature that is not positive definite."""


class NotPositiveDefinite(NotIntegrableError):
    """A precision block inside a smoother pass failed its Cholesky test.

    The damping search reads this as "beta too small".
    """

    def __init__(self, k: int | None, block: str, detail: str = ""):
        self.k = k
        self.block = block
        msg = f"{block} not positive definite"
        if k is not None:
            msg += f" at k={k}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class CapacityError(ValueError):
    """A requested quadrature rule would exceed the node budget."""


class EvaluationError(ValueError):
    """A user function returned a non-finite value at a quadrature node."""


class NoFeasibleDamping(RuntimeError):
    """No damping in [alpha_min, alpha_max] produced a valid update."""


class GridTooSmallError(ValueError):
    """The brute-force grid does not cover the posterior mass."""


class ValidationError(ValueError):
    """A configuration or summary file failed validation."""

    def __init__(self, field: str, detail: str = ""):
        self.field = field
        super().__init__(f"{field}: {detail}" if detail else field)


class ParseError(ValueError):
    """A configuration file could not be parsed."""
