"""Binary tensor container.

Layout (little-endian)::

    b"PITT" | version u32 | rank u32 | dims u64[rank] | dtype u8 | raw buffer
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"PITT"
VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def to_bytes(arr) -> bytes:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype} for tensor container")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", DTYPE_CODES[dt])
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r} at offset 0")
    if len(buf) < 12:
        raise FormatError(f"{source}: truncated header at offset {len(buf)}")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4")
    off = 12
    if len(buf) < off + 8 * rank + 1:
        raise FormatError(f"{source}: truncated header at offset {len(buf)}")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    code = buf[off]
    off += 1
    if code not in CODE_DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code} at offset {off - 1}")
    dt = CODE_DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != need:
        raise FormatError(f"{source}: expected {need} payload bytes at offset {off}, "
                          f"found {len(buf) - off}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).copy()


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, arr) -> None:
    atomic_write(path, to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: {e.strerror}") from e
    return from_bytes(buf, str(path))
