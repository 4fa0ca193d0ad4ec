"""Exception hierarchy shared by all tucl modules."""


class TuclError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(TuclError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(TuclError, ValueError):
    """A scalar or categorical argument is outside its valid range."""


class ContractError(TuclError, ValueError):
    """An input violates a precondition that is not about shape."""


class ValidationError(TuclError, ValueError):
    """A deserialized object violates a type invariant."""


class CorruptFileError(TuclError, OSError):
    """A container file is truncated, mis-sized, or fails its checksum."""


class NumericError(TuclError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ConfigurationError(TuclError, ValueError):
    """A run configuration cannot be executed."""


class UndefinedCorrelationError(TuclError, ValueError):
    """Correlation requested for a sample with zero variance."""
