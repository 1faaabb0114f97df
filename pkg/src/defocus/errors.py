"""Exception types shared across the package."""


class DefocusError(Exception):
    """Base class for all package errors."""


class DimensionError(DefocusError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DefocusError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigurationError(DefocusError, ValueError):
    """A configuration value is invalid (odd head_dim, indivisible image size, ...)."""


class DomainError(DefocusError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class NumericalError(DefocusError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ResourceError(DefocusError, MemoryError):
    """A request would materialize an object that is too large."""


class FormatError(DefocusError, ValueError):
    """A file does not match its declared binary or text format."""


class DataError(DefocusError, ValueError):
    """Dataset contents are invalid (e.g. a label out of range)."""
