from .client import (
    ClientSession,
    LoopbackTransport,
    ProgressiveResult,
    SocketTransport,
    State,
    TriggerPolicy,
    fetch_progressive,
)
from .server import ModelServer, ServerRepository, serve, start_server

__all__ = [
    "ClientSession",
    "LoopbackTransport",
    "ModelServer",
    "ProgressiveResult",
    "ServerRepository",
    "SocketTransport",
    "State",
    "TriggerPolicy",
    "fetch_progressive",
    "serve",
    "start_server",
]
