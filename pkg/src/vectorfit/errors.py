"""Exception types shared across the package."""


class VectorFitError(Exception):
    """Base class for all package errors."""


class DimensionError(VectorFitError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(VectorFitError, ValueError):
    """A precondition of an operation was violated."""


class ValidationError(VectorFitError, ValueError):
    """Invalid input data or configuration."""


class NumericalError(VectorFitError, ArithmeticError):
    """Non-finite values or a numerical routine failed to converge."""


class CheckpointError(VectorFitError, IOError):
    """A checkpoint file could not be read or does not match."""
