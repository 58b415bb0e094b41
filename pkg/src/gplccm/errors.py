"""Exception hierarchy shared across the package."""


class GpLccmError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(GpLccmError):
    pass


class SchemaError(GpLccmError):
    """A required column is absent from an input file."""


class DataError(GpLccmError):
    """Input data violates a structural invariant."""


class ParseError(DataError):
    pass


class DegenerateFeatureError(DataError):
    pass


class ShapeError(GpLccmError, ValueError):
    pass


class AvailabilityError(GpLccmError):
    pass


class WeightError(GpLccmError, ValueError):
    pass


class ConditioningError(GpLccmError):
    """Cholesky factorisation failed even after jitter escalation."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class ConvergenceError(GpLccmError):
    def __init__(self, message, last_delta=None):
        super().__init__(message)
        self.last_delta = last_delta


class OptimizationError(GpLccmError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics if diagnostics is not None else []


class EmptyClassError(GpLccmError):
    pass


class DegenerateClassError(GpLccmError):
    pass


class UndefinedVOTError(GpLccmError, ZeroDivisionError):
    pass


class PredictionError(GpLccmError):
    pass


class FoldSizeError(GpLccmError, ValueError):
    """A cross-validation fold has fewer persons than latent classes."""
