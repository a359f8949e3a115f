"""Binary checkpoint format: a named-tensor table that round-trips byte-exactly.

Layout (little-endian): magic "C1CK", format version u32, entry count u32,
then per entry: name length u16, utf-8 name bytes, rank u8, dims u32[rank],
float64 data. Optimizer state and counters are stored as reserved-prefix
entries next to the model tensors.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"C1CK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def save(path, entries) -> None:
    """Write (name, array) pairs in the given order."""
    entries = [(name, np.asarray(value, dtype=np.float64)) for name, value in entries]
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names in checkpoint")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(entries)))
        for name, value in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            for dim in value.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(value.astype("<f8", copy=False).tobytes())


def load(path) -> dict:
    """Read the tensor table back as an ordered name -> array mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = _HEADER.size
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).copy()
            offset += 8 * size
            out[name] = data.reshape(dims)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed entry at offset {offset}: {exc}") from exc
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return out
