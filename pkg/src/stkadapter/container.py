"""Binary array container used for checkpoints and dataset bundles.

Layout (all integers little-endian)::

    magic      4 bytes  b"STKC"
    version    uint32   FORMAT_VERSION
    meta_len   uint32   length of the UTF-8 JSON metadata blob
    meta       bytes
    n_arrays   uint32
    repeated n_arrays times:
        name_len  uint16, name (UTF-8)
        dtype     1 byte: b"d" float64 or b"q" int64
        ndim      uint32
        dims      ndim x uint64
        data      row-major values, little-endian
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"STKC"
FORMAT_VERSION = 1

_DTYPES = {b"d": np.dtype("<f8"), b"q": np.dtype("<i8")}


class ContainerError(ValueError):
    pass


def _code(arr: np.ndarray) -> bytes:
    if np.issubdtype(arr.dtype, np.floating):
        return b"d"
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        return b"q"
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    buf = io.BytesIO()
    blob = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(code)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise ContainerError("not an STKC container (bad magic)")
    version, meta_len = struct.unpack_from("<II", view, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12
    meta = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        dtype = _DTYPES.get(bytes(view[pos:pos + 1]))
        if dtype is None:
            raise ContainerError(f"unknown dtype code for array {name!r}")
        pos += 1
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(bytes(view[pos:pos + nbytes]), dtype=dtype).reshape(shape).copy()
        pos += nbytes
    return arrays, meta


def save(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
