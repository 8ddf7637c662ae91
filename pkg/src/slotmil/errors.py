"""Exception types shared across the package."""


class SlotMILError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SlotMILError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(SlotMILError, ValueError):
    """A configuration value or argument is outside its allowed range."""


class ContractError(SlotMILError, ValueError):
    """A documented precondition was violated by the caller."""


class ValidationError(SlotMILError, ValueError):
    """Loaded data failed a consistency check."""


class FormatError(SlotMILError, RuntimeError):
    """A binary file does not match its expected layout."""


class TruncationError(FormatError):
    """A binary file declares more payload than it contains."""


class NumericError(SlotMILError, ArithmeticError):
    """A non-finite value was encountered where finiteness is required."""


class UndefinedMetricError(SlotMILError, ValueError):
    """The requested metric is undefined for the given inputs."""
