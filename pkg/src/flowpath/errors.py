"""Exception types shared across the package."""


class FlowpathError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowpathError, ValueError):
    """Array dimensions do not chain or do not match a declared shape."""


class NumericError(FlowpathError, ArithmeticError):
    """A computation produced a non-finite intermediate or result."""


class ValidationError(FlowpathError, ValueError):
    """A domain object violates one of its invariants."""


class BudgetError(FlowpathError, RuntimeError):
    """An exhaustive enumeration would exceed its path budget."""


class InsufficientDataError(FlowpathError, ValueError):
    """An estimate needs more samples than the caller supplied."""


class DegenerateWeightsError(FlowpathError, ArithmeticError):
    """All importance weights are zero or non-finite."""


class CheckpointError(FlowpathError, RuntimeError):
    """A checkpoint file is corrupt, truncated, or version-incompatible."""
