"""LEB128-style unsigned varints and zig-zag signed mapping.

7 data bits per byte, bit 7 as continuation flag, least-significant group
first. Array encode/decode paths are vectorised for codec residual streams.
"""

from __future__ import annotations

import numpy as np


class VarintError(ValueError):
    pass


def zigzag(values: np.ndarray) -> np.ndarray:
    """Map signed int64 values onto unsigned so small magnitudes stay small."""
    v = np.asarray(values, dtype=np.int64)
    return ((v << 1) ^ (v >> 63)).astype(np.uint64)


def unzigzag(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.uint64)
    return ((v >> np.uint64(1)).astype(np.int64)) ^ -((v & np.uint64(1)).astype(np.int64))


def encode_uvarint(value: int) -> bytes:
    if value < 0:
        raise VarintError("varint values must be non-negative")
    out = bytearray()
    while True:
        bits = value & 0x7F
        value >>= 7
        if value:
            out.append(0x80 | bits)
        else:
            out.append(bits)
            return bytes(out)


def decode_uvarint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Decode one varint; returns (value, next offset)."""
    value = 0
    shift = 0
    pos = offset
    while True:
        if pos >= len(data):
            raise VarintError("truncated varint")
        b = data[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos
        shift += 7
        if shift > 63:
            raise VarintError("varint too long")


def encode_uvarint_array(values: np.ndarray) -> bytes:
    """Vectorised varint encoding of a uint64 array (values < 2**35)."""
    v = np.asarray(values, dtype=np.uint64)
    if v.size == 0:
        return b""
    if np.any(v >= (1 << 35)):
        raise VarintError("array varint values limited to < 2**35")
    nbytes = np.ones(v.shape, dtype=np.int64)
    for threshold in (1 << 7, 1 << 14, 1 << 21, 1 << 28):
        nbytes += v >= threshold
    ends = np.cumsum(nbytes)
    total = int(ends[-1])
    out = np.zeros(total, dtype=np.uint8)
    starts = ends - nbytes
    remaining = v.copy()
    # place byte i of every value still needing one, setting continuation bits
    for i in range(5):
        mask = nbytes > i
        if not mask.any():
            break
        pos = starts[mask] + i
        chunk = (remaining[mask] & np.uint64(0x7F)).astype(np.uint8)
        more = (nbytes[mask] - 1) > i
        out[pos] = chunk | (more.astype(np.uint8) << 7)
        remaining[mask] >>= np.uint64(7)
    return out.tobytes()


def decode_uvarint_array(data: bytes, count: int) -> tuple[np.ndarray, int]:
    """Vectorised decode of `count` varints; returns (values, bytes consumed)."""
    if count == 0:
        return np.zeros(0, dtype=np.uint64), 0
    buf = np.frombuffer(data, dtype=np.uint8)
    terminators = np.flatnonzero(buf < 0x80)
    if terminators.size < count:
        raise VarintError("truncated varint array")
    ends = terminators[:count] + 1
    starts = np.concatenate([[0], ends[:-1]])
    lengths = ends - starts
    if np.any(lengths > 5):
        raise VarintError("array varint longer than 5 bytes")
    values = np.zeros(count, dtype=np.uint64)
    for i in range(int(lengths.max())):
        mask = lengths > i
        chunk = buf[starts[mask] + i].astype(np.uint64) & np.uint64(0x7F)
        values[mask] |= chunk << np.uint64(7 * i)
    return values, int(ends[-1])
