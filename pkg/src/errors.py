class DetectorError(Exception):
    """Base class for input and validation errors (CLI exit code 1)."""


class ConfigurationError(DetectorError):
    """Invalid network configuration, settings file or tensor shape."""


class WeightsFormatError(DetectorError):
    """Binary weights stream does not match the network configuration."""


class AnnotationError(DetectorError):
    """Missing or malformed ground-truth annotation."""


class ImageFormatError(DetectorError):
    """Image file cannot be read or is not a supported format."""


class PreconditionError(DetectorError):
    """An operation was called with arguments violating its precondition."""


class TrainingError(DetectorError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
