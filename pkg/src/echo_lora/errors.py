"""Exception types shared across the package."""


class EchoLoraError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EchoLoraError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(EchoLoraError, ArithmeticError):
    """A value that must be finite is not."""


class DataError(EchoLoraError, ValueError):
    """Token ids, labels or samples violate their contract."""


class ConfigError(EchoLoraError, ValueError):
    """A configuration value is invalid or inconsistent."""


class UsageError(EchoLoraError, RuntimeError):
    """An API was called in a way it does not support."""


class CheckpointError(EchoLoraError, IOError):
    """A checkpoint file is malformed, truncated or incomplete."""


class TrainingError(EchoLoraError, RuntimeError):
    """A training step was aborted before any parameter update."""
