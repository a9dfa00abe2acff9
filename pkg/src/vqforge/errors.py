"""Exception hierarchy shared by all vqforge modules."""


class VQError(Exception):
    """Base class for every error raised by vqforge."""


class FormatError(VQError, ValueError):
    """A file or buffer does not conform to its container format."""


class CorruptionError(FormatError):
    """A checksum did not match the payload it protects."""


class TruncatedError(VQError, OSError):
    """A file ended before its declared payload was complete."""


class DataError(VQError, ValueError):
    """Numeric payload is invalid (e.g. NaN or Inf weights)."""


class PartitionError(VQError, ValueError):
    """Sub-vector length does not divide the row length."""


class SeedingError(VQError, ValueError):
    """Not enough sub-vectors to seed the requested codebook."""


class ContractError(VQError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DivergenceError(VQError, RuntimeError):
    """Calibration produced a non-finite loss.

    The offending optimizer state is attached as ``state`` for post-mortem
    inspection.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}
