"""Client side of progressive delivery: a session state machine and the
``fetch_progressive`` driver."""
from __future__ import annotations

import enum
import hashlib
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Union

from ..channel import DEFAULT_CHANNEL, ChannelConfig, PhaseStats, TransferReport, channel_time
from ..codec import decode_timed
from ..errors import InvalidStateError, P2UError, ProtocolError, RemoteError
from ..model_store import QuantizedModel, TensorModel
from ..quant import dequantize
from ..update import UpdateModel, apply_update
from . import wire
from .server import ServerRepository


class State(enum.Enum):
    IDLE = "idle"
    AWAITING_MODEL = "awaiting-model"
    SERVING_LOW = "serving-low"
    AWAITING_UPDATE = "awaiting-update"
    SERVING_PROXY = "serving-proxy"


# AWAITING_UPDATE keeps serving the low-precision model while the update is in flight
INFERENCE_STATES = frozenset({State.SERVING_LOW, State.AWAITING_UPDATE, State.SERVING_PROXY})


class SocketTransport:
    def __init__(self, endpoint: tuple[str, int], timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def request(self, msg: wire.Message) -> wire.Message:
        # a kept-alive connection may have died with a server restart: retry once on a fresh one
        reused = self._sock is not None
        try:
            return self._exchange(msg)
        except (ConnectionError, ProtocolError):
            self.close()
            if not reused:
                raise
        return self._exchange(msg)

    def _exchange(self, msg: wire.Message) -> wire.Message:
        if self._sock is None:
            self._sock = socket.create_connection(self.endpoint, timeout=self.timeout)
        wire.write_message(self._sock, msg)
        reply = wire.read_message(self._sock)
        if reply is None:
            self.close()
            raise ConnectionError("server closed the connection")
        return reply

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


class LoopbackTransport:
    """Talks to an in-process repository, still round-tripping every frame
    through the wire encoding."""

    def __init__(self, repository: ServerRepository):
        self.repository = repository

    def request(self, msg: wire.Message) -> wire.Message:
        server_side = wire.decode_message(wire.encode_message(msg)[4:])
        reply = self.repository.handle(server_side)
        return wire.decode_message(wire.encode_message(reply)[4:])

    def close(self) -> None:
        pass


Endpoint = Union[tuple, str, ServerRepository, SocketTransport, LoopbackTransport]


def make_transport(endpoint: Endpoint):
    if isinstance(endpoint, (SocketTransport, LoopbackTransport)):
        return endpoint
    if isinstance(endpoint, ServerRepository):
        return LoopbackTransport(endpoint)
    if isinstance(endpoint, str):
        host, _, port = endpoint.rpartition(":")
        return SocketTransport((host or "127.0.0.1", int(port)))
    return SocketTransport(tuple(endpoint))


def _unwrap(reply: wire.Message, expected: type) -> wire._Response:
    if not isinstance(reply, expected):
        raise ProtocolError(f"expected {expected.__name__}, got {type(reply).__name__}")
    if not reply.ok:
        raise RemoteError(reply.status, reply.error)
    return reply


class ClientSession:
    """Receiver state machine: Idle -> AwaitingModel -> ServingLowPrec ->
    AwaitingUpdate -> ServingProxy.

    The served model is swapped by a single reference assignment, so
    concurrent ``infer`` calls see either the whole low model or the whole
    proxy.
    """

    def __init__(self, endpoint: Endpoint, channel: ChannelConfig = DEFAULT_CHANNEL):
        self.transport = make_transport(endpoint)
        self.channel = channel
        self._lock = threading.Lock()
        self._state = State.IDLE
        self._served: TensorModel | None = None
        self.model_id: str | None = None
        self.base_bitwidth: int | None = None
        self.base_checksum: bytes | None = None
        self.low: TensorModel | None = None
        self.proxy: TensorModel | None = None
        self.report: TransferReport | None = None
        self.refetches = 0
        self.events: list[str] = []

    @property
    def state(self) -> State:
        return self._state

    @property
    def model(self) -> TensorModel:
        served = self._served
        if self._state not in INFERENCE_STATES or served is None:
            raise InvalidStateError(f"no model is served in state {self._state.value}")
        return served

    def infer(self, fn, x):
        """Run ``fn(model, x)`` against the currently served model."""
        return fn(self.model, x)

    def _transition(self, allowed: set[State], new: State) -> None:
        with self._lock:
            if self._state not in allowed:
                raise InvalidStateError(f"cannot move from {self._state.value} to {new.value}")
            self._state = new

    def fetch_base(self, model_id: str, bitwidth: int) -> TensorModel:
        self._transition({State.IDLE}, State.AWAITING_MODEL)
        try:
            low, phase, checksum = self._download_base(model_id, bitwidth)
        except BaseException:
            self._state = State.IDLE
            raise
        self.model_id, self.base_bitwidth, self.base_checksum = model_id, bitwidth, checksum
        self.low = low
        self.report = TransferReport(model_id, bitwidth, phase)
        self._served = low
        self._state = State.SERVING_LOW
        return low

    def _download_base(self, model_id: str, bitwidth: int):
        self.events.append("send:model-request")
        reply = _unwrap(self.transport.request(wire.ModelRequest(model_id, bitwidth)), wire.ModelResponse)
        self.events.append("recv:base")
        qmodel, decode_s = decode_timed(reply.bitstream)
        if not isinstance(qmodel, QuantizedModel) or qmodel.bitwidth != bitwidth:
            raise ProtocolError("server sent something other than the requested base model")
        start = time.perf_counter()
        low = dequantize(qmodel)
        dequantize_s = time.perf_counter() - start
        size = len(reply.bitstream)
        phase = PhaseStats(size, reply.encode_s, channel_time(size, self.channel), decode_s, dequantize_s)
        return low, phase, hashlib.sha256(reply.bitstream).digest()

    def fetch_update(self, tolerance: float | None = None) -> TensorModel:
        """Request, verify and apply the precision update.

        A base-mismatch answer triggers exactly one re-fetch of the base at
        the same bitwidth, after which the update is requested again.
        """
        self._transition({State.SERVING_LOW}, State.AWAITING_UPDATE)
        try:
            try:
                reply = self._request_update(tolerance)
            except RemoteError as exc:
                if exc.code != wire.ERR_BASE_MISMATCH:
                    raise
                self.refetches += 1
                low, phase, checksum = self._download_base(self.model_id, self.base_bitwidth)
                self.low, self.base_checksum = low, checksum
                self.report = TransferReport(self.model_id, self.base_bitwidth, phase)
                self._served = low
                reply = self._request_update(tolerance)
            update, decode_s = decode_timed(reply.bitstream)
            if not isinstance(update, UpdateModel):
                raise ProtocolError("server sent something other than an update")
            start = time.perf_counter()
            proxy = apply_update(self.low, update, self.base_checksum)
            apply_s = time.perf_counter() - start
        except BaseException:
            self._state = State.SERVING_LOW
            raise
        size = len(reply.bitstream)
        self.report.update = PhaseStats(size, reply.encode_s, channel_time(size, self.channel), decode_s, 0.0)
        self.report.update_bitwidth = update.update_bitwidth
        self.report.apply_s = apply_s
        self.report.validate()
        self.proxy = proxy
        self._served = proxy
        self._state = State.SERVING_PROXY
        return proxy

    def _request_update(self, tolerance):
        self.events.append("send:update-request")
        req = wire.UpdateRequest(self.model_id, self.base_bitwidth, self.base_checksum, tolerance)
        reply = _unwrap(self.transport.request(req), wire.UpdateResponse)
        self.events.append("recv:update")
        return reply

    def list_models(self):
        reply = self.transport.request(wire.ListModels())
        if not isinstance(reply, wire.ModelList):
            raise ProtocolError(f"expected ModelList, got {type(reply).__name__}")
        return reply.manifests

    def close(self) -> None:
        self.transport.close()


@dataclass(frozen=True)
class TriggerPolicy:
    kind: str = "immediate"  # immediate | after-delay | manual
    delay_s: float = 0.0

    def __post_init__(self):
        if self.kind not in ("immediate", "after-delay", "manual"):
            raise ValueError(f"unknown trigger policy {self.kind!r}")
        if self.delay_s < 0:
            raise ValueError("trigger delay must be non-negative")

    @classmethod
    def parse(cls, text: "str | float | TriggerPolicy") -> "TriggerPolicy":
        """``immediate``, ``manual``, ``after:<seconds>`` or a number of seconds."""
        if isinstance(text, TriggerPolicy):
            return text
        if isinstance(text, (int, float)):
            return cls("after-delay", float(text))
        if text.startswith(("after:", "after-delay:")):
            return cls("after-delay", float(text.split(":", 1)[1]))
        return cls(text)


@dataclass
class ProgressiveResult:
    low: TensorModel | None
    proxy: TensorModel | None
    report: TransferReport | None
    phase: str  # last completed phase: none | base | proxy
    error: Exception | None = None
    session: ClientSession | None = field(default=None, repr=False)

    def __iter__(self):
        return iter((self.low, self.proxy, self.report))


def fetch_progressive(
    endpoint: Endpoint,
    model_id: str,
    low_bitwidth: int,
    trigger: "str | float | TriggerPolicy" = "immediate",
    *,
    tolerance: float | None = None,
    channel: ChannelConfig = DEFAULT_CHANNEL,
) -> ProgressiveResult:
    """Run the full delivery workflow against one server.

    Failures are reported, not raised: a result whose ``phase`` is ``base``
    carries a usable low-precision model even if the update never arrived.
    """
    policy = TriggerPolicy.parse(trigger)
    session = ClientSession(endpoint, channel)
    try:
        session.fetch_base(model_id, low_bitwidth)
    except (P2UError, OSError) as exc:
        session.close()
        return ProgressiveResult(None, None, None, "none", exc, session)
    if policy.kind == "manual":
        return ProgressiveResult(session.low, None, session.report, "base", None, session)
    if policy.kind == "after-delay":
        time.sleep(policy.delay_s)
    try:
        session.fetch_update(tolerance)
    except (P2UError, OSError) as exc:
        return ProgressiveResult(session.low, None, session.report, "base", exc, session)
    finally:
        session.close()
    return ProgressiveResult(session.low, session.proxy, session.report, "proxy", None, session)
