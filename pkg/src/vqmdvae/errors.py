"""Exception types shared across the package."""


class VQMDVAEError(Exception):
    """Base class for all package errors."""


class InvalidInputError(VQMDVAEError, ValueError):
    pass


class ConfigurationError(VQMDVAEError, ValueError):
    pass


class NumericError(VQMDVAEError, ArithmeticError):
    pass


class StratificationError(VQMDVAEError, ValueError):
    pass


class ContainerError(VQMDVAEError, IOError):
    """Raised when a tensor container or checkpoint cannot be read."""


class UnrecognizedContainerError(ContainerError):
    pass


class TruncatedTensorError(ContainerError):
    pass


class MissingTensorError(ContainerError):
    pass


class ManifestMismatchError(ContainerError):
    pass


class TrainingDiverged(NumericError):
    """Non-finite loss during training; carries the last good checkpoint."""

    def __init__(self, message, step, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good
