"""
Binary checkpoint format.

Layout (little-endian): magic ``MTCP0001``, u32 entry count, then per entry
u32 name length, UTF-8 name, u32 rank, rank × u32 dims, float64 payload.
The version lives in the magic; bump it on any layout change.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

from mtcp_errors import CheckpointError

MAGIC = b"MTCP0001"
MAGIC_PREFIX = b"MTCP"


def save_checkpoint(path: Path, tensors: Dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array, dtype="<f8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC_PREFIX)] != MAGIC_PREFIX:
        raise CheckpointError(f"{path}: not an mtcp checkpoint")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: checkpoint version {raw[4:8]!r} != supported {MAGIC[4:]!r}")
    offset = len(MAGIC)
    tensors: Dict[str, np.ndarray] = {}
    try:
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if offset + 8 * size > len(raw):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(dims).astype(np.float64)
            offset += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors
