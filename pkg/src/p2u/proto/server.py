"""Model repository and the TCP server that delivers bases and updates."""
from __future__ import annotations

import logging
import socket
import socketserver
import threading
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

from ..codec import Bitstream, encode
from ..errors import P2UError, ProtocolError
from ..model_store import SUPPORTED_BITWIDTHS, ModelManifest, QuantizedModel, TensorModel, load_model
from ..quant import dequantize, quantize
from ..update import compute_update, select_update_bitwidth
from . import wire

log = logging.getLogger(__name__)

HIGH_BITWIDTH = 32


@dataclass(frozen=True)
class _Prepared:
    bitstream: Bitstream
    dequantized: TensorModel


class ServerRepository:
    """model-id -> float model, plus a memo of encodings per bitwidth.

    The high-precision reference is the 32-bit quantized copy of each model;
    every other precision is derived from it on demand. Cached entries are
    exactly what a fresh encoding would produce.
    """

    def __init__(self, models: dict[str, TensorModel] | None = None):
        self._lock = threading.RLock()
        self._models: dict[str, TensorModel] = {}
        self._high: dict[str, QuantizedModel] = {}
        self._cache: dict[tuple[str, int], _Prepared] = {}
        self._updates: dict[tuple[str, int, int], Bitstream] = {}
        for model_id, model in (models or {}).items():
            self.put(model_id, model)

    @classmethod
    def from_directory(cls, path: str | PathLike) -> "ServerRepository":
        """Load every ``*.p2um`` file; the file stem is the model id."""
        repo = cls()
        for f in sorted(Path(path).glob("*.p2um")):
            repo.put(f.stem, load_model(f))
        return repo

    def put(self, model_id: str, model: TensorModel) -> None:
        """Add or replace a model. Replacing drops its cached encodings."""
        high_q = quantize(model, HIGH_BITWIDTH)
        with self._lock:
            self._models[model_id] = model
            self._high[model_id] = high_q
            for key in [k for k in self._cache if k[0] == model_id]:
                del self._cache[key]
            for key in [k for k in self._updates if k[0] == model_id]:
                del self._updates[key]

    @property
    def model_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._models)

    def __contains__(self, model_id: str) -> bool:
        with self._lock:
            return model_id in self._models

    def high_precision(self, model_id: str) -> TensorModel:
        return self.prepare(model_id, HIGH_BITWIDTH).dequantized

    def prepare(self, model_id: str, bitwidth: int) -> _Prepared:
        if bitwidth not in SUPPORTED_BITWIDTHS:
            raise ValueError(f"unsupported bitwidth {bitwidth}")
        key = (model_id, bitwidth)
        with self._lock:
            hit = self._cache.get(key)
            high_q = self._high[model_id]
        if hit is not None:
            return hit
        if bitwidth == HIGH_BITWIDTH:
            qmodel = high_q
        else:
            qmodel = quantize(dequantize(high_q), bitwidth)
        prepared = _Prepared(encode(qmodel), dequantize(qmodel))
        with self._lock:
            # a concurrent put() may have replaced the model meanwhile
            if self._high.get(model_id) is high_q:
                prepared = self._cache.setdefault(key, prepared)
        return prepared

    def prepare_update(self, model_id: str, base_bitwidth: int, tolerance: float | None = None) -> Bitstream:
        base = self.prepare(model_id, base_bitwidth)
        high = self.high_precision(model_id)
        low = base.dequantized
        update_bitwidth = HIGH_BITWIDTH if tolerance is None else select_update_bitwidth(high, low, tolerance)
        key = (model_id, base_bitwidth, update_bitwidth)
        with self._lock:
            hit = self._updates.get(key)
        if hit is not None:
            return hit
        update = compute_update(
            high, low, update_bitwidth, base_checksum=base.bitstream.checksum, base_bitwidth=base_bitwidth
        )
        stream = encode(update)
        with self._lock:
            if self._cache.get((model_id, base_bitwidth)) is base:
                stream = self._updates.setdefault(key, stream)
        return stream

    def manifest(self, model_id: str) -> ModelManifest:
        sizes, checksums = {}, {}
        for b in SUPPORTED_BITWIDTHS:
            bs = self.prepare(model_id, b).bitstream
            sizes[b] = bs.size
            checksums[b] = bs.checksum
        return ModelManifest(model_id, sizes, checksums)

    # --- request handling (transport independent) -------------------------

    def handle(self, msg: wire.Message) -> wire.Message:
        if isinstance(msg, wire.ModelRequest):
            return self._handle_model(msg)
        if isinstance(msg, wire.UpdateRequest):
            return self._handle_update(msg)
        if isinstance(msg, wire.ListModels):
            return wire.ModelList([self.manifest(m) for m in self.model_ids])
        raise ProtocolError(f"unexpected message from client: {type(msg).__name__}")

    def _handle_model(self, msg: wire.ModelRequest) -> wire.ModelResponse:
        if msg.model_id not in self:
            return wire.ModelResponse(status=wire.ERR_UNKNOWN_MODEL, error=f"unknown model {msg.model_id!r}")
        if msg.bitwidth not in SUPPORTED_BITWIDTHS:
            return wire.ModelResponse(status=wire.ERR_UNKNOWN_BITWIDTH, error=f"unsupported bitwidth {msg.bitwidth}")
        bs = self.prepare(msg.model_id, msg.bitwidth).bitstream
        return wire.ModelResponse(bs.data, bs.encode_seconds)

    def _handle_update(self, msg: wire.UpdateRequest) -> wire.UpdateResponse:
        if msg.model_id not in self:
            return wire.UpdateResponse(status=wire.ERR_UNKNOWN_MODEL, error=f"unknown model {msg.model_id!r}")
        if msg.base_bitwidth not in SUPPORTED_BITWIDTHS:
            return wire.UpdateResponse(
                status=wire.ERR_UNKNOWN_BITWIDTH, error=f"unsupported base bitwidth {msg.base_bitwidth}"
            )
        if msg.tolerance is not None and not msg.tolerance > 0:
            return wire.UpdateResponse(status=wire.ERR_BAD_REQUEST, error="tolerance must be positive")
        base = self.prepare(msg.model_id, msg.base_bitwidth)
        if base.bitstream.checksum != msg.base_checksum:
            return wire.UpdateResponse(
                status=wire.ERR_BASE_MISMATCH,
                error="base checksum does not match the server's encoding; re-fetch the base model",
            )
        bs = self.prepare_update(msg.model_id, msg.base_bitwidth, msg.tolerance)
        return wire.UpdateResponse(bs.data, bs.encode_seconds)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        repo: ServerRepository = self.server.repository  # type: ignore[attr-defined]
        sock = self.request
        self.server.track(sock, True)  # type: ignore[attr-defined]
        try:
            self._serve(repo, sock)
        finally:
            self.server.track(sock, False)  # type: ignore[attr-defined]

    def _serve(self, repo, sock):
        while True:
            try:
                msg = wire.read_message(sock)
                if msg is None:
                    return
                reply = repo.handle(msg)
            except ProtocolError as exc:
                log.warning("closing connection from %s: %s", self.client_address, exc)
                return
            except P2UError as exc:
                log.error("request failed: %s", exc)
                return
            wire.write_message(sock, reply)


class ModelServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, repository: ServerRepository, address: tuple[str, int]):
        super().__init__(address, _Handler)
        self.repository = repository
        self._live: set = set()
        self._live_lock = threading.Lock()

    def track(self, sock, alive: bool) -> None:
        with self._live_lock:
            (self._live.add if alive else self._live.discard)(sock)

    def server_close(self) -> None:
        # also drop kept-alive connections, as a process exit would
        super().server_close()
        with self._live_lock:
            live, self._live = list(self._live), set()
        for sock in live:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    @property
    def endpoint(self) -> tuple[str, int]:
        host, port = self.server_address[:2]
        return host, port


def start_server(repository: ServerRepository, host: str = "127.0.0.1", port: int = 0) -> ModelServer:
    """Start a server on a background thread; call ``shutdown()`` to stop."""
    server = ModelServer(repository, (host, port))
    threading.Thread(target=server.serve_forever, name="p2u-server", daemon=True).start()
    return server


def serve(repository: ServerRepository, endpoint: tuple[str, int]) -> None:
    """Serve until interrupted."""
    if not repository.model_ids:
        raise ValueError("refusing to serve an empty repository")
    with ModelServer(repository, endpoint) as server:
        log.info("serving %s on %s:%d", ", ".join(repository.model_ids), *server.endpoint)
        server.serve_forever()
