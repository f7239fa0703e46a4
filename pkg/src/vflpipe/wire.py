"""Canonical binary encodings shared by every protocol message.

All length prefixes are 4-byte little-endian. Fixed-width element arrays are
a count prefix followed by the concatenated elements, so a message carrying
``n`` elements of width ``w`` is exactly ``4 + n*w`` bytes.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

PREFIX = 4
ELEMENT_BYTES = 32

_U32 = struct.Struct("<I")


class WireError(ValueError):
    pass


def pack_u32(value: int) -> bytes:
    return _U32.pack(value)


def unpack_u32(buf: bytes, offset: int = 0) -> tuple[int, int]:
    if offset + PREFIX > len(buf):
        raise WireError("truncated length prefix")
    return _U32.unpack_from(buf, offset)[0], offset + PREFIX


def pack_elements(elements: Sequence[bytes], width: int = ELEMENT_BYTES) -> bytes:
    for e in elements:
        if len(e) != width:
            raise WireError(f"element of {len(e)} bytes, expected {width}")
    return pack_u32(len(elements)) + b"".join(elements)


def unpack_elements(buf: bytes, width: int = ELEMENT_BYTES, offset: int = 0) -> tuple[list[bytes], int]:
    count, at = unpack_u32(buf, offset)
    end = at + count * width
    if end > len(buf):
        raise WireError(f"truncated element array: need {end} bytes, have {len(buf)}")
    return [buf[i:i + width] for i in range(at, end, width)], end


def pack_sections(*sections: bytes) -> bytes:
    return b"".join(pack_u32(len(s)) + s for s in sections)


def unpack_sections(buf: bytes) -> list[bytes]:
    out, at = [], 0
    while at < len(buf):
        n, at = unpack_u32(buf, at)
        if at + n > len(buf):
            raise WireError("truncated section")
        out.append(buf[at:at + n])
        at += n
    return out


def int_to_fixed(value: int, width: int) -> bytes:
    return int(value).to_bytes(width, "big")


def pack_bigint(value: int) -> bytes:
    """Minimal big-endian magnitude behind a 4-byte length prefix."""
    value = int(value)
    if value < 0:
        raise WireError("negative big integer")
    raw = value.to_bytes((value.bit_length() + 7) // 8, "big")
    return pack_u32(len(raw)) + raw


def unpack_bigint(buf: bytes, offset: int = 0) -> tuple[int, int]:
    n, at = unpack_u32(buf, offset)
    if at + n > len(buf):
        raise WireError("truncated big integer")
    return int.from_bytes(buf[at:at + n], "big"), at + n


def pack_ids(ids: Iterable[int]) -> bytes:
    """Sample ids as unsigned 64-bit little-endian values."""
    arr = np.asarray(list(ids), dtype="<u8")
    return pack_u32(len(arr)) + arr.tobytes()


def unpack_ids(buf: bytes, offset: int = 0) -> tuple[list[int], int]:
    count, at = unpack_u32(buf, offset)
    end = at + 8 * count
    if end > len(buf):
        raise WireError("truncated id list")
    return [int(v) for v in np.frombuffer(buf[at:end], dtype="<u8")], end


def pack_matrix(a: np.ndarray) -> bytes:
    """2-D float64 array: rows, cols prefixes then little-endian row-major data."""
    a = np.ascontiguousarray(a, dtype="<f8")
    if a.ndim == 1:
        a = a[:, None]
    return pack_u32(a.shape[0]) + pack_u32(a.shape[1]) + a.tobytes()


def unpack_matrix(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    rows, at = unpack_u32(buf, offset)
    cols, at = unpack_u32(buf, at)
    end = at + 8 * rows * cols
    if end > len(buf):
        raise WireError("truncated matrix")
    return np.frombuffer(buf[at:end], dtype="<f8").reshape(rows, cols).copy(), end
