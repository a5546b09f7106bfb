"""Exception hierarchy shared by every module."""


class VLDebiasError(Exception):
    """Base class for all package errors."""


class FormatError(VLDebiasError):
    pass


class ConsistencyError(VLDebiasError):
    pass


class DataError(VLDebiasError):
    pass


class IoError(VLDebiasError):
    pass


class PairingError(VLDebiasError):
    def __init__(self, message, unmatched=()):
        super().__init__(message)
        self.unmatched = list(unmatched)


class DimError(VLDebiasError):
    pass


class DomainError(VLDebiasError):
    pass


class QueueNotWarmError(VLDebiasError):
    pass


class ConfigError(VLDebiasError):
    pass


class StateError(VLDebiasError):
    pass


class DegenerateError(VLDebiasError):
    pass


class LabelError(VLDebiasError):
    pass


class UsageError(ConfigError):
    """Bad command-line flags or a method/artifact mismatch."""
