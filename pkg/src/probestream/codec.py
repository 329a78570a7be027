"""Lossless temporal frame codec over plane sets.

Reference software codec standing behind a pluggable interface: I-frames are
self-contained, P-frames predict 16x16-element blocks from the previous
reconstructed frame (SKIP for bit-identical blocks, DELTA for entropy-coded
residuals, RAW otherwise), and I-frames may predict a block from its left
neighbour. Frames never reference the future, and the encoder has zero
lookahead: every frame is emitted as soon as it is presented. Encoding is
closed-loop lossless, so encoder and decoder reconstructions are
bit-identical after every frame.

Entropy coding is zero-run-length over byte streams with varint headers:
token ``(length << 1) | 1`` emits `length` zero bytes, token ``length << 1``
is followed by `length` literal bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from probestream.packing import PlaneKind, PlaneSet
from probestream.varint import (
    decode_uvarint,
    decode_uvarint_array,
    encode_uvarint,
    encode_uvarint_array,
    unzigzag,
    zigzag,
)

BLOCK_SIDE = 16
MIN_ZERO_RUN = 2

MODE_SKIP = 0
MODE_DELTA = 1
MODE_RAW = 2

FRAME_MAGIC = b"LPF1"
_FRAME_HEADER = struct.Struct("<4sBIIHHBBI")
_CHECKSUM = struct.Struct("<I")

DEFAULT_GOP_LENGTH = 30


class CodecError(Exception):
    pass


class CorruptFrameError(CodecError):
    pass


class MissingReferenceError(CodecError):
    pass


class SequenceError(CodecError):
    pass


class DimensionMismatchError(CodecError):
    pass


class EntropyDecodeError(CodecError):
    pass


# --- entropy coding ----------------------------------------------------------


def entropy_encode(data) -> bytes:
    """Zero-run-length encode a byte stream; deterministic and lossless."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data, dtype=np.uint8).reshape(-1)
    else:
        buf = np.frombuffer(bytes(data), np.uint8)
    n = buf.size
    if n == 0:
        return b""
    padded = np.concatenate([[False], buf == 0, [False]])
    edges = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    out = bytearray()
    pos = 0
    raw = buf.tobytes()
    for s, e in zip(starts, ends):
        if e - s < MIN_ZERO_RUN:
            continue  # lone zeros ride along as literals
        if s > pos:
            out += encode_uvarint((s - pos) << 1)
            out += raw[pos:s]
        out += encode_uvarint(((e - s) << 1) | 1)
        pos = e
    if pos < n:
        out += encode_uvarint((n - pos) << 1)
        out += raw[pos:]
    return bytes(out)


def entropy_decode(data: bytes) -> bytes:
    """Inverse of `entropy_encode`; raises on malformed streams."""
    out = bytearray()
    pos = 0
    end = len(data)
    while pos < end:
        try:
            header, pos = decode_uvarint(data, pos)
        except ValueError as err:
            raise EntropyDecodeError(str(err)) from err
        length = header >> 1
        if header & 1:
            out += b"\0" * length
        else:
            if length == 0 or pos + length > end:
                raise EntropyDecodeError("malformed literal run")
            out += data[pos : pos + length]
            pos += length
    return bytes(out)


# --- stream state and frame container ----------------------------------------


@dataclass
class CodecStreamState:
    """Per-stream codec state; single-owner, one per direction."""

    stream_id: int
    role: str = "encoder"  # "encoder" | "decoder"
    gop_length: int = DEFAULT_GOP_LENGTH
    frame_count: int = 0
    reference: PlaneSet | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.role not in ("encoder", "decoder"):
            raise ValueError(f"role must be encoder or decoder, got {self.role!r}")
        if self.gop_length < 1:
            raise ValueError("GOP length must be >= 1")


@dataclass
class EncodedFrame:
    stream_id: int
    frame_seq: int
    key: bool
    width: int
    height: int
    plane_count: int
    element_bits: int
    payload: bytes

    @property
    def plane_kind(self) -> PlaneKind:
        return PlaneKind.COLOR_10IN16 if self.element_bits == 16 else PlaneKind.VISIBILITY_BYTES

    @property
    def raw_bytes(self) -> int:
        return self.plane_count * self.width * self.height * (self.element_bits // 8)

    def to_bytes(self) -> bytes:
        header = _FRAME_HEADER.pack(
            FRAME_MAGIC,
            1 if self.key else 0,
            self.stream_id,
            self.frame_seq,
            self.width,
            self.height,
            self.plane_count,
            self.element_bits,
            len(self.payload),
        )
        body = header + self.payload
        return body + _CHECKSUM.pack(zlib.crc32(body))

    @property
    def encoded_size(self) -> int:
        return _FRAME_HEADER.size + len(self.payload) + _CHECKSUM.size

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedFrame":
        if len(data) < _FRAME_HEADER.size + _CHECKSUM.size:
            raise CorruptFrameError("frame truncated")
        magic, flags, stream_id, seq, width, height, planes, bits, paylen = (
            _FRAME_HEADER.unpack_from(data, 0)
        )
        if magic != FRAME_MAGIC:
            raise CorruptFrameError(f"bad frame magic {magic!r}")
        total = _FRAME_HEADER.size + paylen + _CHECKSUM.size
        if len(data) != total:
            raise CorruptFrameError(f"frame length {len(data)} != declared {total}")
        (stored,) = _CHECKSUM.unpack_from(data, total - _CHECKSUM.size)
        if zlib.crc32(data[: total - _CHECKSUM.size]) != stored:
            raise CorruptFrameError("frame checksum mismatch")
        payload = data[_FRAME_HEADER.size : total - _CHECKSUM.size]
        return cls(stream_id, seq, bool(flags & 1), width, height, planes, bits, payload)


# --- block coding ------------------------------------------------------------


def _signed_view(dtype: np.dtype) -> type:
    return np.int16 if dtype == np.uint16 else np.int8


def _encode_delta(cur: np.ndarray, pred: np.ndarray) -> bytes:
    residual = (cur - pred).view(_signed_view(cur.dtype)).astype(np.int64)
    return entropy_encode(
        np.frombuffer(encode_uvarint_array(zigzag(residual.reshape(-1))), np.uint8)
    )


def _decode_delta(data: bytes, pred: np.ndarray) -> np.ndarray:
    stream = entropy_decode(data)
    values, used = decode_uvarint_array(stream, pred.size)
    if used != len(stream):
        raise CorruptFrameError("trailing bytes in delta block")
    residual = unzigzag(values).astype(_signed_view(pred.dtype)).reshape(pred.shape)
    return pred + residual.view(pred.dtype)


def _encode_raw(cur: np.ndarray) -> bytes:
    return entropy_encode(np.ascontiguousarray(cur).view(np.uint8).reshape(-1))


def _decode_raw(data: bytes, shape: tuple[int, int], dtype) -> np.ndarray:
    stream = entropy_decode(data)
    expect = shape[0] * shape[1] * np.dtype(dtype).itemsize
    if len(stream) != expect:
        raise CorruptFrameError(f"raw block is {len(stream)} bytes, expected {expect}")
    return np.frombuffer(stream, dtype=dtype).reshape(shape).copy()


def block_mode_select(current: np.ndarray, reference: np.ndarray | None) -> int:
    """Pick SKIP, DELTA or RAW for one block against its temporal reference."""
    if reference is None:
        return MODE_RAW
    if np.array_equal(current, reference):
        return MODE_SKIP
    if len(_encode_delta(current, reference)) < len(_encode_raw(current)):
        return MODE_DELTA
    return MODE_RAW


def _block_grid(height: int, width: int) -> list[tuple[int, int, int, int]]:
    """(y0, x0, h, w) for every block; edge blocks clipped, never padded."""
    blocks = []
    for y0 in range(0, height, BLOCK_SIDE):
        h = min(BLOCK_SIDE, height - y0)
        for x0 in range(0, width, BLOCK_SIDE):
            blocks.append((y0, x0, h, min(BLOCK_SIDE, width - x0)))
    return blocks


def _encode_plane(
    cur: np.ndarray, ref: np.ndarray | None, recon: np.ndarray, out: bytearray
) -> None:
    height, width = cur.shape
    changed = None
    if ref is not None:
        changed = cur != ref
    for y0, x0, h, w in _block_grid(height, width):
        block = cur[y0 : y0 + h, x0 : x0 + w]
        if ref is not None and not changed[y0 : y0 + h, x0 : x0 + w].any():
            out.append(MODE_SKIP)
            recon[y0 : y0 + h, x0 : x0 + w] = block
            continue
        if ref is not None:
            pred = ref[y0 : y0 + h, x0 : x0 + w]
        elif x0 >= BLOCK_SIDE:
            # intra prediction from the already reconstructed left neighbour
            pred = recon[y0 : y0 + h, x0 - BLOCK_SIDE : x0 - BLOCK_SIDE + w]
        else:
            pred = None
        raw_payload = _encode_raw(block)
        if pred is not None:
            delta_payload = _encode_delta(block, pred)
            if len(delta_payload) < len(raw_payload):
                out.append(MODE_DELTA)
                out += encode_uvarint(len(delta_payload))
                out += delta_payload
                recon[y0 : y0 + h, x0 : x0 + w] = block
                continue
        out.append(MODE_RAW)
        out += encode_uvarint(len(raw_payload))
        out += raw_payload
        recon[y0 : y0 + h, x0 : x0 + w] = block


def _decode_plane(
    data: bytes, pos: int, ref: np.ndarray | None, recon: np.ndarray
) -> int:
    height, width = recon.shape
    for y0, x0, h, w in _block_grid(height, width):
        if pos >= len(data):
            raise CorruptFrameError("payload ends mid-plane")
        mode = data[pos]
        pos += 1
        if mode == MODE_SKIP:
            if ref is None:
                raise CorruptFrameError("SKIP block in a key frame")
            recon[y0 : y0 + h, x0 : x0 + w] = ref[y0 : y0 + h, x0 : x0 + w]
            continue
        try:
            length, pos = decode_uvarint(data, pos)
        except ValueError as err:
            raise CorruptFrameError(str(err)) from err
        if pos + length > len(data):
            raise CorruptFrameError("block payload overruns frame")
        payload = data[pos : pos + length]
        pos += length
        if mode == MODE_DELTA:
            if ref is not None:
                pred = ref[y0 : y0 + h, x0 : x0 + w]
            elif x0 >= BLOCK_SIDE:
                pred = recon[y0 : y0 + h, x0 - BLOCK_SIDE : x0 - BLOCK_SIDE + w]
            else:
                raise CorruptFrameError("DELTA block without a reference")
            recon[y0 : y0 + h, x0 : x0 + w] = _decode_delta(payload, pred)
        elif mode == MODE_RAW:
            recon[y0 : y0 + h, x0 : x0 + w] = _decode_raw(payload, (h, w), recon.dtype)
        else:
            raise CorruptFrameError(f"unknown block mode {mode}")
    return pos


# --- frame encode / decode ---------------------------------------------------


def encode_frame(
    planes: PlaneSet, state: CodecStreamState, force_key: bool = False
) -> EncodedFrame:
    """Encode one frame and advance the stream state (closed loop)."""
    if state.role != "encoder":
        raise CodecError("encode_frame requires an encoder stream state")
    if state.reference is not None and (
        state.reference.data.shape != planes.data.shape
        or state.reference.kind != planes.kind
    ):
        raise DimensionMismatchError(
            f"frame {planes.data.shape} does not match stream {state.reference.data.shape}"
        )
    key = force_key or state.reference is None or state.frame_count % state.gop_length == 0
    out = bytearray()
    recon = np.empty_like(planes.data)
    for p in range(planes.data.shape[0]):
        ref = None if key else state.reference.data[p]
        _encode_plane(planes.data[p], ref, recon[p], out)
    seq = state.frame_count
    state.frame_count = seq + 1
    state.reference = PlaneSet(planes.kind, recon)
    return EncodedFrame(
        stream_id=state.stream_id,
        frame_seq=seq,
        key=key,
        width=planes.width,
        height=planes.height,
        plane_count=planes.data.shape[0],
        element_bits=planes.element_bits,
        payload=bytes(out),
    )


def decode_frame(frame: EncodedFrame, state: CodecStreamState) -> PlaneSet:
    """Decode one frame, verify sequencing, and advance the stream state."""
    if state.role != "decoder":
        raise CodecError("decode_frame requires a decoder stream state")
    if not frame.key:
        if state.reference is None:
            raise MissingReferenceError(
                f"P-frame seq {frame.frame_seq} with no prior state"
            )
        if frame.frame_seq != state.frame_count:
            raise SequenceError(
                f"frame seq {frame.frame_seq}, decoder expected {state.frame_count}"
            )
        if state.reference.data.shape[1:] != (frame.height, frame.width):
            raise DimensionMismatchError("frame dims do not match stream state")
    dtype = np.uint16 if frame.element_bits == 16 else np.uint8
    recon = np.empty((frame.plane_count, frame.height, frame.width), dtype=dtype)
    pos = 0
    for p in range(frame.plane_count):
        ref = None if frame.key else state.reference.data[p]
        pos = _decode_plane(frame.payload, pos, ref, recon[p])
    if pos != len(frame.payload):
        raise CorruptFrameError("trailing bytes after last plane")
    planes = PlaneSet(frame.plane_kind, recon)
    state.reference = planes.copy()
    state.frame_count = frame.frame_seq + 1
    return planes


def compression_ratio(planes: PlaneSet, frame: EncodedFrame) -> float:
    return planes.data.nbytes / frame.encoded_size
