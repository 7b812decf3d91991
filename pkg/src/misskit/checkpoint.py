"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes  b"MSKCKPT\\0"
    version u32
    count   u32
    count x record:
        name_len u32, name utf-8 bytes
        ndim u32, dims ndim x u64
        data prod(dims) x float64 (little-endian)

Records are written in name order so identical states give identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"MSKCKPT\0"
FORMAT_VERSION = 1


def dumps_state(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_state(blob: bytes) -> dict[str, np.ndarray]:
    try:
        return _loads(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"corrupt or truncated checkpoint: {exc}") from None


def _loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise DataError("not a misskit checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = 16
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        state[name] = arr.astype(np.float64)
    if pos != len(blob):
        raise DataError("trailing bytes in checkpoint")
    return state


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_state(state))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads_state(Path(path).read_bytes())
