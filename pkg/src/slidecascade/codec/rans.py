"""Byte-renormalized rANS coder over per-element integer tables.

The coder state x lives in [RANS_L, RANS_L << 8) = [2^23, 2^31) between
symbol operations.  Encoding walks the symbol sequence in reverse and
emits renormalization bytes; the stream layout is the 32-bit final state
(little-endian) followed by the emitted bytes in reverse emission order,
so the decoder reads the state first and then consumes bytes forward.
Decoding is the exact inverse, finishing back at RANS_L with every byte
consumed; anything else means truncation or corruption.

Encode/decode are pure functions of (symbols, tables): no internal
randomness, no platform-dependent arithmetic, hence byte-identical output
across runs.
"""

from __future__ import annotations

import struct

import numpy as np
from numba import njit

from .gaussian import as_table_batch

__all__ = ["RANS_L", "STATE_UPPER", "rans_encode", "rans_decode", "CorruptStreamError"]

RANS_L = 1 << 23
STATE_UPPER = RANS_L << 8


class CorruptStreamError(ValueError):
    """A segment failed a structural check: wrong length, state, or range."""


@njit(cache=True)
def _encode_kernel(idx, counts, precision, out):
    x = np.int64(RANS_L)
    pos = 0
    renorm_shift = 31 - precision
    for i in range(idx.shape[0] - 1, -1, -1):
        s = idx[i]
        start = np.int64(0)
        for j in range(s):
            start += counts[i, j]
        f = counts[i, s]
        x_max = f << renorm_shift
        while x >= x_max:
            out[pos] = x & 0xFF
            pos += 1
            x >>= 8
        x = ((x // f) << precision) + (x % f) + start
    return x, pos


@njit(cache=True)
def _decode_kernel(payload, counts, precision, out_idx):
    n_bytes = payload.shape[0]
    x = (
        np.int64(payload[0])
        | (np.int64(payload[1]) << 8)
        | (np.int64(payload[2]) << 16)
        | (np.int64(payload[3]) << 24)
    )
    pos = 4
    mask = (np.int64(1) << precision) - 1
    for i in range(out_idx.shape[0]):
        if x < RANS_L or x >= STATE_UPPER:
            return x, pos, False
        slot = x & mask
        cum = np.int64(0)
        s = 0
        while cum + counts[i, s] <= slot:
            cum += counts[i, s]
            s += 1
        out_idx[i] = s
        x = counts[i, s] * (x >> precision) + slot - cum
        while x < RANS_L:
            if pos >= n_bytes:
                return x, pos, False
            x = (x << 8) | np.int64(payload[pos])
            pos += 1
    return x, pos, True


def rans_encode(symbols, tables) -> bytes:
    """Encode integer symbols against their per-element tables."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    batch = as_table_batch(tables, symbols.shape[0])
    if symbols.size == 0:
        return struct.pack("<I", RANS_L)
    idx = symbols - batch.support_min
    if idx.min() < 0 or idx.max() >= batch.n_symbols:
        bad = int(np.where((idx < 0) | (idx >= batch.n_symbols))[0][0])
        raise ValueError(f"symbol out of support at index {bad}: value {int(symbols[bad])}")
    # At precision <= 18 a symbol emits at most 3 renormalization bytes.
    buf = np.empty(symbols.shape[0] * 3 + 8, dtype=np.uint8)
    x, pos = _encode_kernel(idx, batch.counts, batch.precision, buf)
    return struct.pack("<I", int(x)) + bytes(buf[:pos][::-1])


def rans_decode(segment: bytes, tables, count: int) -> np.ndarray:
    """Recover exactly ``count`` symbols; the segment must be consumed fully."""
    if count < 0:
        raise ValueError("count must be non-negative")
    batch = as_table_batch(tables, count)
    if len(segment) < 4:
        raise CorruptStreamError(f"segment too short ({len(segment)} bytes) for a coder state")
    payload = np.frombuffer(segment, dtype=np.uint8)
    if count == 0:
        (x,) = struct.unpack("<I", segment[:4])
        if x != RANS_L or len(segment) != 4:
            raise CorruptStreamError("empty segment with unexpected state or trailing bytes")
        return np.zeros(0, dtype=np.int64)
    out_idx = np.empty(count, dtype=np.int64)
    x, pos, ok = _decode_kernel(payload, batch.counts, batch.precision, out_idx)
    if not ok:
        raise CorruptStreamError(f"coder state left its interval at byte {pos}: truncated or corrupted segment")
    if x != RANS_L:
        raise CorruptStreamError(f"final coder state {int(x)} != {RANS_L}: corrupted segment")
    if pos != len(segment):
        raise CorruptStreamError(f"{len(segment) - pos} unconsumed bytes: corrupted segment")
    return out_idx + batch.support_min
