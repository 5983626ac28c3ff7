"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Inputs disagree in shape or a dimension precondition is violated."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class PairingError(ValueError):
    """A batch is too small to form distinct image pairs."""


class ValidationError(ValueError):
    """Bad configuration, missing artifact, or malformed input file."""
