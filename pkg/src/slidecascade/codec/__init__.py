"""Entropy-coding layer: Gaussian tables, rANS coder, bitstream container."""

from .container import (
    BITSTREAM_MAGIC,
    BITSTREAM_VERSION,
    LevelSegment,
    parse_bitstream,
    serialize_bitstream,
)
from .gaussian import (
    DEFAULT_PRECISION,
    DEFAULT_SUPPORT,
    SIGMA_FLOOR,
    GaussianPmfTable,
    TableBatch,
    discretize_gaussian,
    estimate_rate,
    gaussian_table_batch,
)
from .rans import RANS_L, STATE_UPPER, CorruptStreamError, rans_decode, rans_encode

__all__ = [
    "BITSTREAM_MAGIC",
    "BITSTREAM_VERSION",
    "CorruptStreamError",
    "DEFAULT_PRECISION",
    "DEFAULT_SUPPORT",
    "GaussianPmfTable",
    "LevelSegment",
    "RANS_L",
    "SIGMA_FLOOR",
    "STATE_UPPER",
    "TableBatch",
    "discretize_gaussian",
    "estimate_rate",
    "gaussian_table_batch",
    "parse_bitstream",
    "rans_decode",
    "rans_encode",
    "serialize_bitstream",
]
