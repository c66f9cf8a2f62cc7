"""Exception hierarchy shared by every module of the package."""


class PanPrivError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PanPrivError, ValueError):
    """Invalid group, field, or experiment configuration."""


class ParameterError(PanPrivError, ValueError):
    """A numeric parameter is outside its admissible range."""


class KeyMismatchError(PanPrivError, ValueError):
    """Ciphertexts and keys belong to different groups, or a key is malformed."""


class DecodeRangeError(PanPrivError, ValueError):
    """A decrypted exponent lies outside the configured decoding bound."""


class ProtocolError(PanPrivError, RuntimeError):
    """A client state machine was driven out of order (e.g. past its horizon)."""


class MalformedReportError(PanPrivError, ValueError):
    """A report does not decrypt to the expected shape or alphabet."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class ReductionError(PanPrivError, ValueError):
    """A reduced ciphertext was rejected (e.g. rerandomized past the horizon)."""
