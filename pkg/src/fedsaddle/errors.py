"""Exception types."""


class ConfigError(ValueError):
    """Invalid configuration or dimension mismatch."""


class SchemaError(ConfigError):
    """Config file violates the documented schema; message names the field."""


class DivergenceError(RuntimeError):
    """Trajectory left the numerically safe region."""


class StepSizeError(ConfigError):
    """Step size too large for the stationarity threshold denominator."""


class InsufficientTrialsError(ConfigError):
    """Monte Carlo estimate requested with too few trials."""
