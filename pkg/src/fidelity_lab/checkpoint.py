"""Single-file binary checkpoints.

Layout (little-endian)::

    magic      4 bytes   e.g. b"TDIF" or b"CFMS"
    version    u32
    count      u32       number of arrays
    count x {
        name_len u16, name utf-8,
        ndim u32, dims u32 * ndim
    }
    payload    f64 values of every array, row-major, in table order
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(magic: bytes, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise CheckpointError("magic must be 4 bytes")
    head = [magic, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    body = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        body.append(arr.tobytes())
    return b"".join(head + body)


def decode(blob: bytes, magic: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != magic:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        nbytes = 8 * size
        if off + nbytes > len(blob):
            raise CheckpointError("truncated checkpoint payload")
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
        off += nbytes
    if off != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return out


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | os.PathLike, magic: bytes, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(magic, arrays))


def load(path: str | os.PathLike, magic: bytes) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes(), magic)
