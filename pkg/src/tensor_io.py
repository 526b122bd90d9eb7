"""
MMT1 tensor serialization.

Layout (little-endian): b"MMT1", u8 dtype code (0=f32, 1=f64), u8 rank,
rank x u32 extents, then the raw row-major data.
"""
import struct
from typing import BinaryIO

import numpy as np

from src.errors import FormatError

MAGIC = b"MMT1"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _read_exact(stream: BinaryIO, count: int, what: str) -> bytes:
    data = stream.read(count)
    if len(data) != count:
        raise FormatError(f"Truncated MMT1 block while reading {what} ({len(data)}/{count} bytes)")
    return data


def write_mmt1(stream: BinaryIO, array: np.ndarray) -> None:
    """
    Writes one tensor block.

    Args:
        stream: Binary output stream.
        array: float32/float64 array; other dtypes are stored as float64.
    """
    array = np.asarray(array)
    if array.dtype not in _CODES:
        array = array.astype(np.float64)
    if array.ndim > 255:
        raise FormatError(f"MMT1 supports rank <= 255, got {array.ndim}")
    code = _CODES[array.dtype]
    stream.write(MAGIC)
    stream.write(struct.pack("<BB", code, array.ndim))
    if array.ndim:
        stream.write(struct.pack(f"<{array.ndim}I", *array.shape))
    stream.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def read_mmt1(stream: BinaryIO) -> np.ndarray:
    """Reads one tensor block written by `write_mmt1`."""
    magic = _read_exact(stream, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"Bad tensor magic {magic!r}, expected {MAGIC!r}")
    code, rank = struct.unpack("<BB", _read_exact(stream, 2, "header"))
    if code not in _DTYPES:
        raise FormatError(f"Unknown MMT1 dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, "extents")) if rank else ()
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(stream, count * dtype.itemsize, "data")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
