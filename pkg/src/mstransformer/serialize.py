"""Binary container for named tensors.

Layout (all integers little-endian)::

    magic     8 bytes   b"MSTTNSR1"
    count     uint32    number of records
    record*   repeated ``count`` times:
      name_len  uint16
      name      name_len bytes, UTF-8
      dtype     uint8     1 = float64, 2 = float32, 3 = int64
      ndim      uint8
      shape     ndim x uint64
      values    prod(shape) x itemsize bytes, row-major, little-endian

Values are written verbatim, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MSTTNSR1"
_CODES = {np.dtype("<f8"): 1, np.dtype("<f4"): 2, np.dtype("<i8"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


class FormatError(ValueError):
    pass


def dump_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(chunks)


def load_tensors_bytes(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise FormatError("not a tensor file (bad magic)")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(shape).copy()
            pos += n * dt.itemsize
            out[name] = arr
    except (struct.error, KeyError, ValueError) as exc:
        raise FormatError(f"truncated or corrupt tensor file: {exc}") from exc
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last record")
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return load_tensors_bytes(Path(path).read_bytes())
