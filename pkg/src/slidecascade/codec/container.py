"""Versioned multi-segment bitstream container.

Layout, little-endian throughout:

    magic   4 bytes "CDSB"
    version u16
    levels  u8
    per level: height u16, width u16, channels u16, payload length u32
    payloads, concatenated in level order
    crc     u32, CRC32 over everything between magic and crc

The CRC makes single-byte corruption a hard parse error rather than a
garbled decode; the per-segment coder-state checks in rans_decode cover
truncation inside a segment.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

__all__ = ["LevelSegment", "serialize_bitstream", "parse_bitstream", "BITSTREAM_MAGIC", "BITSTREAM_VERSION"]

BITSTREAM_MAGIC = b"CDSB"
BITSTREAM_VERSION = 1
_U16_MAX = 0xFFFF


@dataclass(frozen=True)
class LevelSegment:
    """One latent level's coded bytes plus its grid geometry."""

    height: int
    width: int
    channels: int
    payload: bytes

    @property
    def n_elements(self) -> int:
        return self.height * self.width * self.channels


def serialize_bitstream(levels) -> bytes:
    levels = list(levels)
    if not levels:
        raise ValueError("a bitstream needs at least one level")
    if len(levels) > 0xFF:
        raise ValueError(f"too many levels ({len(levels)}) for a u8 count")
    parts = [struct.pack("<HB", BITSTREAM_VERSION, len(levels))]
    for i, seg in enumerate(levels):
        for field in ("height", "width", "channels"):
            value = getattr(seg, field)
            if not 0 <= value <= _U16_MAX:
                raise ValueError(f"level {i}: {field}={value} does not fit in u16")
        parts.append(struct.pack("<HHHI", seg.height, seg.width, seg.channels, len(seg.payload)))
    for seg in levels:
        parts.append(seg.payload)
    body = b"".join(parts)
    return BITSTREAM_MAGIC + body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def parse_bitstream(blob: bytes) -> list:
    if len(blob) < 11 or blob[:4] != BITSTREAM_MAGIC:
        raise ValueError("not a bitstream (bad magic)")
    body = blob[4:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError("bitstream CRC mismatch: corrupted or truncated stream")
    version, n_levels = struct.unpack_from("<HB", body, 0)
    if version != BITSTREAM_VERSION:
        raise ValueError(f"unsupported bitstream version {version}")
    offset = 3
    headers = []
    for _ in range(n_levels):
        if offset + 10 > len(body):
            raise ValueError("bitstream header truncated")
        h, w, c, length = struct.unpack_from("<HHHI", body, offset)
        offset += 10
        headers.append((h, w, c, length))
    levels = []
    for h, w, c, length in headers:
        payload = body[offset : offset + length]
        if len(payload) != length:
            raise ValueError("bitstream payload truncated")
        offset += length
        levels.append(LevelSegment(h, w, c, payload))
    if offset != len(body):
        raise ValueError(f"{len(body) - offset} unexpected trailing bytes in bitstream")
    return levels
