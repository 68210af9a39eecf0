"""Exception hierarchy shared by every pqvae module."""


class PQVAEError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PQVAEError, ValueError):
    """Array shapes do not agree."""


class StateError(PQVAEError, RuntimeError):
    """A cache or accumulator does not belong to the object it is used with."""


class InputError(PQVAEError, ValueError):
    """Input data is malformed (e.g. contains NaN or Inf)."""


class ConfigurationError(PQVAEError, ValueError):
    """A parameter or config key is outside its valid range."""


class ParseError(PQVAEError, ValueError):
    """A binary or text file could not be decoded."""


class StampMismatchError(PQVAEError, ValueError):
    """Codes, index and model disagree on their (M, N, K) parameters."""


class TrainingError(PQVAEError, RuntimeError):
    """Training produced a non-finite value.

    ``payload`` carries diagnostic details; ``checkpoint`` holds the last
    artifacts known to be finite, when available.
    """

    def __init__(self, message, payload=None, checkpoint=None):
        super().__init__(message)
        self.payload = payload or {}
        self.checkpoint = checkpoint
