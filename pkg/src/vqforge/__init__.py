"""Vector quantization of weight matrices with convex-combination codeword search."""

from .errors import (
    ContractError,
    CorruptionError,
    DataError,
    DivergenceError,
    FormatError,
    PartitionError,
    SeedingError,
    TruncatedError,
    VQError,
)

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "CorruptionError",
    "DataError",
    "DivergenceError",
    "FormatError",
    "PartitionError",
    "SeedingError",
    "TruncatedError",
    "VQError",
]
