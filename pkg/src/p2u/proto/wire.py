"""Length-prefixed framing and message codecs.

Every frame is ``u32 length | u8 tag | body`` where ``length`` counts the
tag and body, and every body starts with a one-byte protocol version.
Integers are little-endian.
"""
from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from ..errors import ProtocolError
from ..model_store import DIGEST_SIZE, ModelManifest

PROTOCOL_VERSION = 1
MAX_FRAME = 1 << 31

TAG_MODEL_REQUEST = 1
TAG_MODEL_RESPONSE = 2
TAG_UPDATE_REQUEST = 3
TAG_UPDATE_RESPONSE = 4
TAG_LIST_MODELS = 5
TAG_MODEL_LIST = 6

# response status codes
OK = 0
ERR_UNKNOWN_MODEL = 1
ERR_UNKNOWN_BITWIDTH = 2
ERR_BASE_MISMATCH = 3
ERR_BAD_REQUEST = 4


@dataclass(frozen=True)
class ModelRequest:
    model_id: str
    bitwidth: int


@dataclass(frozen=True)
class UpdateRequest:
    model_id: str
    base_bitwidth: int
    base_checksum: bytes
    tolerance: Optional[float] = None


@dataclass(frozen=True)
class ListModels:
    pass


@dataclass(frozen=True)
class _Response:
    bitstream: bytes = b""
    encode_s: float = 0.0
    status: int = OK
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OK


class ModelResponse(_Response):
    pass


class UpdateResponse(_Response):
    pass


@dataclass(frozen=True)
class ModelList:
    manifests: list = field(default_factory=list)


Message = Union[ModelRequest, ModelResponse, UpdateRequest, UpdateResponse, ListModels, ModelList]


def _str16(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class _Body:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError("message body is shorter than its fields")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def str16(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("string field is not UTF-8") from exc

    def rest(self) -> bytes:
        out = self.data[self.pos :]
        self.pos = len(self.data)
        return out

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.pos} unexpected trailing bytes in message")


def encode_message(msg: Message) -> bytes:
    """Serialize ``msg`` into a complete frame."""
    v = bytes([PROTOCOL_VERSION])
    if isinstance(msg, ModelRequest):
        tag, body = TAG_MODEL_REQUEST, v + _str16(msg.model_id) + bytes([msg.bitwidth])
    elif isinstance(msg, UpdateRequest):
        if len(msg.base_checksum) != DIGEST_SIZE:
            raise ValueError("base checksum must be 32 bytes")
        tol = b"\x00" if msg.tolerance is None else b"\x01" + struct.pack("<d", msg.tolerance)
        tag = TAG_UPDATE_REQUEST
        body = v + _str16(msg.model_id) + bytes([msg.base_bitwidth]) + msg.base_checksum + tol
    elif isinstance(msg, ListModels):
        tag, body = TAG_LIST_MODELS, v
    elif isinstance(msg, _Response):
        tag = TAG_UPDATE_RESPONSE if isinstance(msg, UpdateResponse) else TAG_MODEL_RESPONSE
        if msg.ok:
            body = v + bytes([OK]) + struct.pack("<d", msg.encode_s) + msg.bitstream
        else:
            body = v + bytes([msg.status]) + msg.error.encode("utf-8")
    elif isinstance(msg, ModelList):
        parts = [v, struct.pack("<I", len(msg.manifests))]
        for m in msg.manifests:
            parts.append(_str16(m.model_id))
            parts.append(bytes([len(m.sizes)]))
            for b in sorted(m.sizes):
                parts.append(bytes([b]) + struct.pack("<Q", m.sizes[b]) + m.checksums[b])
        tag, body = TAG_MODEL_LIST, b"".join(parts)
    else:
        raise TypeError(f"not a protocol message: {msg!r}")
    payload = bytes([tag]) + body
    return struct.pack("<I", len(payload)) + payload


def decode_message(payload: bytes) -> Message:
    """Parse ``tag | body`` (a frame without its length prefix)."""
    if not payload:
        raise ProtocolError("empty frame")
    tag = payload[0]
    body = _Body(payload[1:])
    (version,) = body.unpack("<B")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if tag == TAG_MODEL_REQUEST:
        msg = ModelRequest(body.str16(), body.unpack("<B")[0])
    elif tag == TAG_UPDATE_REQUEST:
        model_id = body.str16()
        (base_bitwidth,) = body.unpack("<B")
        checksum = body.take(DIGEST_SIZE)
        (has_tol,) = body.unpack("<B")
        tolerance = body.unpack("<d")[0] if has_tol else None
        msg = UpdateRequest(model_id, base_bitwidth, checksum, tolerance)
    elif tag == TAG_LIST_MODELS:
        msg = ListModels()
    elif tag in (TAG_MODEL_RESPONSE, TAG_UPDATE_RESPONSE):
        cls = ModelResponse if tag == TAG_MODEL_RESPONSE else UpdateResponse
        (status,) = body.unpack("<B")
        if status == OK:
            (encode_s,) = body.unpack("<d")
            msg = cls(body.rest(), encode_s)
        else:
            msg = cls(status=status, error=body.rest().decode("utf-8", "replace"))
    elif tag == TAG_MODEL_LIST:
        manifests = []
        for _ in range(body.unpack("<I")[0]):
            model_id = body.str16()
            sizes, checksums = {}, {}
            for _ in range(body.unpack("<B")[0]):
                b, size = body.unpack("<BQ")
                sizes[b] = size
                checksums[b] = body.take(DIGEST_SIZE)
            manifests.append(ModelManifest(model_id, sizes, checksums))
        msg = ModelList(manifests)
    else:
        raise ProtocolError(f"unknown message tag {tag}")
    body.done()
    return msg


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            if got == 0:
                return None
            raise ProtocolError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes | None:
    """Return one frame's ``tag | body``, or None on a clean EOF."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    if length == 0 or length > MAX_FRAME:
        raise ProtocolError(f"frame length {length} out of bounds")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise ProtocolError("connection closed before frame body")
    return payload


def read_message(sock: socket.socket) -> Message | None:
    payload = read_frame(sock)
    return None if payload is None else decode_message(payload)


def write_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))
