"""Exception types raised across the package."""


class HarmonyError(Exception):
    """Base class for all package errors."""


class SchemaError(HarmonyError, ValueError):
    """Trace or schema sidecar does not match the expected layout."""


class OrderingError(HarmonyError, ValueError):
    """Timestamps are not strictly increasing with a constant stride."""


class SizeError(HarmonyError, ValueError):
    """Not enough timestamps for the requested split or window length."""


class DimensionError(HarmonyError, ValueError):
    """Array shapes are inconsistent with each other or with the parameters."""


class NumericError(HarmonyError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class TrainingError(HarmonyError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConfigurationError(HarmonyError, ValueError):
    """A configuration value is missing or invalid."""


class ModelError(HarmonyError, RuntimeError):
    """The model is unfitted or its parameters are unusable."""


class GateError(HarmonyError, RuntimeError):
    """The 90-90 validation gate refused the model."""

    def __init__(self, message, fraction):
        super().__init__(message)
        self.fraction = fraction
