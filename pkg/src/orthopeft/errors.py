"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class InputError(ValueError):
    """Bad caller-supplied values (labels out of range, empty batch, ...)."""


class ConfigurationError(ValueError):
    """Inconsistent model, PEFT or generator configuration."""


class FormatError(ValueError):
    """Malformed dataset or checkpoint file."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""
