"""Locally pan-private telemetry: encrypted client state machines, aggregation,
two-server validity proofs and lower-bound numerics."""

from .crypto import (
    Ciphertext,
    GroupSpec,
    PrivateKey,
    PublicKey,
    add_ciphertexts,
    dec,
    enc,
    get_group,
    keygen,
    rerandomize,
    scalar_mul,
)
from .dp import NoiseParams, RRParams
from .errors import (
    ConfigurationError,
    DecodeRangeError,
    KeyMismatchError,
    MalformedReportError,
    PanPrivError,
    ParameterError,
    ProtocolError,
    ReductionError,
)

__version__ = "0.1.0"
