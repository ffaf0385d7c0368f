class ConfigError(ValueError):
    """Inconsistent dimensions, invalid settings or malformed input files."""


class NumericalError(ArithmeticError):
    """Non-finite values or singular systems encountered during computation."""
