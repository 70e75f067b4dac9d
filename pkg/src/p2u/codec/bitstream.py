"""``P2UB`` bitstreams: a self-describing header, an entropy-coded payload
and a sha256 trailer. Byte layout is documented in FORMATS.md."""
from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from ..errors import (
    BadMagicError,
    DigestMismatchError,
    FormatError,
    MalformedHeaderError,
    PayloadExhaustedError,
    UnsupportedVersionError,
)
from ..model_store import DIGEST_SIZE, SUPPORTED_BITWIDTHS, QTensor, QuantizedModel
from ..update import UPDATE_BITWIDTHS, UpdateModel
from .cabac import STATUS_OK, decode_codes, encode_codes

__all__ = ["Bitstream", "encode", "decode", "decode_timed", "encoded_size", "KIND_MODEL", "KIND_UPDATE"]

MAGIC = b"P2UB"
VERSION = 1
KIND_MODEL = 0
KIND_UPDATE = 1

Encodable = Union[QuantizedModel, UpdateModel]


@dataclass(frozen=True)
class Bitstream:
    data: bytes
    encode_seconds: float = field(default=0.0, compare=False)

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def checksum(self) -> bytes:
        """sha256 of the whole stream; identifies a base for updates."""
        return hashlib.sha256(self.data).digest()

    def __len__(self) -> int:
        return len(self.data)


def _pack_str16(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("name longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


def _header(q: Encodable) -> bytes:
    parts = [MAGIC, bytes([VERSION])]
    if isinstance(q, UpdateModel):
        parts.append(bytes([KIND_UPDATE, q.update_bitwidth, q.base_bitwidth]))
        parts.append(q.base_checksum)
    else:
        parts.append(bytes([KIND_MODEL, q.bitwidth, 0]))
    parts.append(_pack_str16(q.name))
    parts.append(struct.pack("<I", len(q.tensors)))
    for t in q.tensors:
        if len(t.shape) > 255:
            raise ValueError("tensor rank above 255")
        parts.append(_pack_str16(t.name))
        parts.append(bytes([len(t.shape)]))
        parts.append(struct.pack(f"<{len(t.shape)}I", *t.shape))
        parts.append(struct.pack("<f", t.scale))
    return b"".join(parts)


def _payload(q: Encodable) -> bytes:
    if not q.tensors or sum(t.size for t in q.tensors) == 0:
        return b""
    flat = np.concatenate([t.qvalues.ravel() for t in q.tensors])
    return encode_codes(flat, q.bitwidth).tobytes()


_warm = False


def warmup() -> None:
    """Compile (or load from cache) the coder so timings exclude the JIT."""
    global _warm
    if not _warm:
        codes = np.array([0, 1, -3], dtype=np.int64)
        decode_codes(encode_codes(codes, 8), 3, 8)
        _warm = True


def encode(q: Encodable) -> Bitstream:
    warmup()
    start = time.perf_counter()
    body = _header(q)
    payload = _payload(q)
    body = body + struct.pack("<I", len(payload)) + payload
    data = body + hashlib.sha256(body).digest()
    return Bitstream(data, time.perf_counter() - start)


def encoded_size(q: Encodable) -> int:
    return len(encode(q).data)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise PayloadExhaustedError(f"stream ends inside the header at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def str16(self) -> str:
        (n,) = struct.unpack("<H", self.take(2))
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedHeaderError("name is not valid UTF-8") from exc


def decode(b: Bitstream | bytes) -> Encodable:
    data = b.data if isinstance(b, Bitstream) else bytes(b)
    if len(data) < 4:
        raise PayloadExhaustedError("stream shorter than its magic number")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    cur = _Cursor(data)
    cur.take(4)
    version = cur.u8()
    if version != VERSION:
        raise UnsupportedVersionError(f"bitstream version {version} is not supported")
    kind, bitwidth, base_bitwidth = cur.u8(), cur.u8(), cur.u8()
    if kind == KIND_MODEL:
        if bitwidth not in SUPPORTED_BITWIDTHS:
            raise MalformedHeaderError(f"unsupported model bitwidth {bitwidth}")
        base_checksum = None
    elif kind == KIND_UPDATE:
        if bitwidth not in UPDATE_BITWIDTHS:
            raise MalformedHeaderError(f"unsupported update bitwidth {bitwidth}")
        base_checksum = cur.take(DIGEST_SIZE)
    else:
        raise MalformedHeaderError(f"unknown payload kind {kind}")
    name = cur.str16()
    layout = []
    for _ in range(cur.u32()):
        tname = cur.str16()
        rank = cur.u8()
        dims = struct.unpack(f"<{rank}I", cur.take(4 * rank))
        (scale,) = struct.unpack("<f", cur.take(4))
        if any(d == 0 for d in dims) or not (scale > 0 and np.isfinite(scale)):
            raise MalformedHeaderError(f"tensor {tname!r}: invalid dims or scale")
        layout.append((tname, dims, scale))
    payload_len = cur.u32()
    end = cur.pos + payload_len
    if end + DIGEST_SIZE > len(data):
        raise PayloadExhaustedError(
            f"payload declares {payload_len} bytes but the stream ends {end + DIGEST_SIZE - len(data)} bytes early"
        )
    if end + DIGEST_SIZE < len(data):
        raise MalformedHeaderError(f"{len(data) - end - DIGEST_SIZE} trailing bytes after the digest")
    if hashlib.sha256(data[:end]).digest() != data[end:]:
        raise DigestMismatchError("bitstream digest does not match its contents")

    sizes = [int(np.prod(d, dtype=np.int64)) for _, d, _ in layout]
    total = sum(sizes)
    payload = np.frombuffer(data, dtype=np.uint8, count=payload_len, offset=cur.pos)
    if total == 0:
        if payload_len:
            raise MalformedHeaderError("payload present for a model without weights")
        flat = np.zeros(0, dtype=np.int64)
    else:
        flat, status, used = decode_codes(payload, total, bitwidth)
        if status != STATUS_OK:
            raise PayloadExhaustedError("entropy decoder ran out of payload bytes")
        if used != payload_len:
            raise MalformedHeaderError(f"{payload_len - used} unused payload bytes")
    qmax = (1 << (bitwidth - 1)) - 1
    if total and int(np.abs(flat).max()) > qmax:
        raise FormatError("decoded codes exceed the declared bitwidth")

    tensors = []
    offset = 0
    for (tname, dims, scale), size in zip(layout, sizes):
        tensors.append(QTensor(tname, dims, flat[offset : offset + size], scale))
        offset += size
    try:
        if kind == KIND_UPDATE:
            return UpdateModel(name, base_bitwidth, bitwidth, base_checksum, tuple(tensors))
        return QuantizedModel(name, bitwidth, tuple(tensors))
    except ValueError as exc:
        raise MalformedHeaderError(str(exc)) from exc


def decode_timed(b: Bitstream | bytes) -> tuple[Encodable, float]:
    warmup()
    start = time.perf_counter()
    out = decode(b)
    return out, time.perf_counter() - start
