"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values and was aborted."""


class SolverError(RuntimeError):
    """An iterative linear solver broke down (e.g. negative curvature)."""


class FormatError(ValueError):
    """A binary or text file does not match its expected layout."""
