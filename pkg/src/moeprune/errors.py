"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""


class InvariantError(RuntimeError):
    """A structural invariant of the model or schedule would be broken."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""
