"""Self-describing binary checkpoint container.

Layout, all little-endian:

    magic   4 bytes  "CDSR"
    version u16
    payload:
        count  u32
        per entry: name_len u16, name utf-8, ndim u8, dims u32 each,
                   values float32 raw
    crc     u32  CRC32 of the payload bytes

Values are stored as float32 regardless of in-memory dtype; shapes and
names round-trip exactly.  The CRC guards against truncated or corrupted
files, which otherwise fail in confusing ways deep inside a model.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION"]

CHECKPOINT_MAGIC = b"CDSR"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict) -> None:
    """Write a name -> array mapping; iteration order is preserved."""
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:40]}...")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into {name: float32 array}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    payload = blob[6:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checkpoint CRC mismatch")
    arrays: dict = {}
    offset = 0
    (count,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        name = payload[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, offset)
        offset += 4 * ndim
        n_values = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n_values, offset=offset)
        offset += 4 * n_values
        arrays[name] = arr.reshape(shape).copy()
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes in checkpoint payload")
    return arrays
