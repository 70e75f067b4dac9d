"""In-memory model types and the ``P2UM`` on-disk container.

Layout of a ``P2UM`` file (all integers unsigned 32-bit little-endian)::

    "P2UM" | version | name_len | name | n_tensors
    per tensor: name_len | name | rank | dims[rank] | float32 values (LE)
    sha256 digest over every preceding byte (32 bytes)

See FORMATS.md for the byte-level description.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import (
    BadMagicError,
    DigestMismatchError,
    FormatError,
    ModelMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
)

__all__ = [
    "SUPPORTED_BITWIDTHS",
    "Tensor",
    "TensorModel",
    "QTensor",
    "QuantizedModel",
    "ModelManifest",
    "save_model",
    "load_model",
    "model_to_bytes",
    "model_from_bytes",
    "model_delta_norms",
    "fingerprint",
    "DeltaNorms",
]

MAGIC = b"P2UM"
VERSION = 1
DIGEST_SIZE = 32
SUPPORTED_BITWIDTHS = (4, 8, 16, 32)

_U32 = struct.Struct("<I")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Tensor:
    name: str
    shape: tuple[int, ...]
    values: np.ndarray  # float32, shaped

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if any(d <= 0 for d in shape):
            raise ValueError(f"tensor {self.name!r}: dims must be positive, got {shape}")
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(
                f"tensor {self.name!r}: {values.size} values do not fill shape {shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError(f"tensor {self.name!r} contains non-finite values")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", _frozen(values.reshape(shape)))

    @property
    def size(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class TensorModel:
    """Named, ordered collection of float32 tensors. Immutable."""

    name: str
    tensors: tuple[Tensor, ...] = ()

    def __post_init__(self):
        tensors = tuple(self.tensors)
        names = [t.name for t in tensors]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate tensor names in model {self.name!r}")
        object.__setattr__(self, "tensors", tensors)

    @classmethod
    def from_arrays(
        cls, name: str, arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]
    ) -> "TensorModel":
        items = arrays.items() if isinstance(arrays, Mapping) else arrays
        tensors = []
        for tname, arr in items:
            arr = np.asarray(arr, dtype=np.float32)
            if arr.ndim == 0:
                arr = arr.reshape(1)
            tensors.append(Tensor(tname, arr.shape, arr))
        return cls(name, tuple(tensors))

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        for t in self.tensors:
            if t.name == name:
                return t.values
        raise KeyError(name)

    def arrays(self) -> dict[str, np.ndarray]:
        return {t.name: t.values for t in self.tensors}

    def with_arrays(self, arrays: Iterable[np.ndarray], name: str | None = None) -> "TensorModel":
        """Same names/shapes, new values (one array per tensor, in order)."""
        arrays = list(arrays)
        if len(arrays) != len(self.tensors):
            raise ModelMismatchError("array count does not match tensor count")
        return TensorModel(
            self.name if name is None else name,
            tuple(Tensor(t.name, t.shape, np.reshape(a, t.shape)) for t, a in zip(self.tensors, arrays)),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, TensorModel):
            return NotImplemented
        if self.name != other.name or len(self.tensors) != len(other.tensors):
            return False
        return all(
            a.name == b.name and a.shape == b.shape and a.values.tobytes() == b.values.tobytes()
            for a, b in zip(self.tensors, other.tensors)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"TensorModel({self.name!r}, {len(self.tensors)} tensors, {self.num_parameters} params)"


@dataclass(frozen=True, eq=False)
class QTensor:
    name: str
    shape: tuple[int, ...]
    qvalues: np.ndarray  # int64, shaped
    scale: float  # exactly representable as float32

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        q = np.ascontiguousarray(self.qvalues, dtype=np.int64)
        if q.size != int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"tensor {self.name!r}: {q.size} codes do not fill shape {shape}")
        scale = float(np.float32(self.scale))
        if not (scale > 0 and np.isfinite(scale)):
            raise ValueError(f"tensor {self.name!r}: scale must be positive and finite")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "qvalues", _frozen(q.reshape(shape)))
        object.__setattr__(self, "scale", scale)

    @property
    def size(self) -> int:
        return self.qvalues.size

    def same_as(self, other: "QTensor") -> bool:
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.scale == other.scale
            and np.array_equal(self.qvalues, other.qvalues)
        )


def check_code_range(tensors: Iterable[QTensor], bitwidth: int) -> None:
    qmax = (1 << (bitwidth - 1)) - 1
    for t in tensors:
        if t.size and int(np.abs(t.qvalues).max()) > qmax:
            raise ValueError(f"tensor {t.name!r}: codes outside symmetric {bitwidth}-bit range")


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    name: str
    bitwidth: int
    tensors: tuple[QTensor, ...] = ()

    def __post_init__(self):
        if self.bitwidth not in SUPPORTED_BITWIDTHS:
            raise ValueError(f"bitwidth must be one of {SUPPORTED_BITWIDTHS}, got {self.bitwidth}")
        tensors = tuple(self.tensors)
        names = [t.name for t in tensors]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate tensor names in model {self.name!r}")
        check_code_range(tensors, self.bitwidth)
        object.__setattr__(self, "tensors", tensors)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        return (
            self.name == other.name
            and self.bitwidth == other.bitwidth
            and len(self.tensors) == len(other.tensors)
            and all(a.same_as(b) for a, b in zip(self.tensors, other.tensors))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass
class ModelManifest:
    """What a server can deliver for one model id."""

    model_id: str
    sizes: dict[int, int] = field(default_factory=dict)
    checksums: dict[int, bytes] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.sizes) != set(self.checksums):
            raise ValueError("every listed bitwidth needs both a size and a checksum")
        for b, digest in self.checksums.items():
            if len(digest) != DIGEST_SIZE:
                raise ValueError(f"checksum for {b}-bit artifact must be {DIGEST_SIZE} bytes")

    @property
    def available_bitwidths(self) -> set[int]:
        return set(self.sizes)


# --- container -----------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def model_to_bytes(model: TensorModel) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _pack_str(model.name), _U32.pack(len(model.tensors))]
    for t in model.tensors:
        if not np.all(np.isfinite(t.values)):
            raise ValueError(f"tensor {t.name!r} contains non-finite values")
        parts.append(_pack_str(t.name))
        parts.append(_U32.pack(len(t.shape)))
        parts.append(struct.pack(f"<{len(t.shape)}I", *t.shape))
        parts.append(t.values.astype("<f4", copy=False).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise TruncatedFileError(f"needed {n} bytes at offset {self.pos}, file ends at {self.end}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("name is not valid UTF-8") from exc


def model_from_bytes(buf: bytes) -> TensorModel:
    if len(buf) < 4:
        raise TruncatedFileError(f"file has {len(buf)} bytes, too short for a header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < 8 + DIGEST_SIZE:
        raise TruncatedFileError("file too short for version and digest")
    r = _Reader(buf, len(buf) - DIGEST_SIZE)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} is not supported")
    name = r.string()
    tensors = []
    for _ in range(r.u32()):
        tname = r.string()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
        tensors.append((tname, dims, values))
    if hashlib.sha256(buf[: r.end]).digest() != buf[r.end :]:
        raise DigestMismatchError("container digest does not match its contents")
    if r.pos != r.end:
        raise FormatError(f"{r.end - r.pos} unexpected bytes before the digest")
    try:
        return TensorModel(name, tuple(Tensor(n, d, v) for n, d, v in tensors))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_model(model: TensorModel, path: str | PathLike) -> None:
    data = model_to_bytes(model)  # validates before anything touches the disk
    with open(path, "wb") as fh:
        fh.write(data)


def load_model(path: str | PathLike) -> TensorModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def fingerprint(model: TensorModel) -> bytes:
    """sha256 of the model's canonical container bytes, trailer included."""
    return hashlib.sha256(model_to_bytes(model)).digest()


# --- comparisons ---------------------------------------------------------


@dataclass(frozen=True)
class DeltaNorms:
    per_tensor: dict[str, tuple[float, float]]  # name -> (max-abs, l2)
    global_max: float


def require_same_layout(a, b) -> None:
    """Raise ModelMismatchError unless names, order and shapes agree."""
    la = [(t.name, t.shape) for t in a.tensors]
    lb = [(t.name, t.shape) for t in b.tensors]
    if la != lb:
        raise ModelMismatchError(f"model layouts differ: {la[:3]}... vs {lb[:3]}...")


def model_delta_norms(a: TensorModel, b: TensorModel) -> DeltaNorms:
    require_same_layout(a, b)
    per_tensor = {}
    for ta, tb in zip(a.tensors, b.tensors):
        d = ta.values.astype(np.float64) - tb.values.astype(np.float64)
        per_tensor[ta.name] = (float(np.abs(d).max()), float(np.sqrt(np.sum(d * d))))
    global_max = max((v[0] for v in per_tensor.values()), default=0.0)
    return DeltaNorms(per_tensor, global_max)
