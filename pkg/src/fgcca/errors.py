"""Exception hierarchy shared across the package."""


class FgccaError(Exception):
    """Base class for every error raised by fgcca."""


class ValidationError(FgccaError, ValueError):
    """Input failed validation (bad grid, bad config, bad file)."""


class InvalidGridError(ValidationError):
    pass


class IncompatibleGridError(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RangeError(ValidationError):
    pass


class DuplicateObservationError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericalError(FgccaError, ArithmeticError):
    """A numerical procedure failed (non-finite values, singular system)."""


class IllPosedMetricError(NumericalError):
    def __init__(self, message: str, process: int | None = None):
        if process is not None:
            message = f"process {process}: {message}"
        super().__init__(message)
        self.process = process


class StationaryPointError(NumericalError):
    pass


class InsufficientDataError(NumericalError):
    pass


class BandwidthTooSmallError(NumericalError):
    def __init__(self, message: str, point: float | None = None):
        if point is not None:
            message = f"{message} (grid point {point:.6g})"
        super().__init__(message)
        self.point = point


class NoOverlapError(NumericalError):
    pass


class DegenerateProcessError(NumericalError):
    pass


class DegenerateComponentError(NumericalError):
    pass


class NormalizationError(ValidationError):
    pass


class ExtrapolationError(ValidationError):
    pass


class SparseDataError(ValidationError):
    pass


class ReconstructionBasisError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass
