"""Precision updates: the quantized difference between a high-precision model
and the low-precision model a client already holds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BaseMismatchError
from .model_store import (
    DIGEST_SIZE,
    QTensor,
    Tensor,
    TensorModel,
    check_code_range,
    fingerprint,
    require_same_layout,
)
from .quant import qmax_for, quantize_array

__all__ = [
    "UPDATE_BITWIDTHS",
    "UpdateModel",
    "compute_update",
    "apply_update",
    "select_update_bitwidth",
    "update_grid_bound",
]

UPDATE_BITWIDTHS = (8, 16, 32)


@dataclass(frozen=True, eq=False)
class UpdateModel:
    name: str
    base_bitwidth: int
    update_bitwidth: int
    base_checksum: bytes
    tensors: tuple[QTensor, ...] = ()

    def __post_init__(self):
        if self.update_bitwidth not in UPDATE_BITWIDTHS:
            raise ValueError(f"update bitwidth must be one of {UPDATE_BITWIDTHS}")
        if not 0 <= self.base_bitwidth <= 32:
            raise ValueError("base bitwidth out of range")
        if not isinstance(self.base_checksum, (bytes, bytearray)) or len(self.base_checksum) != DIGEST_SIZE:
            raise ValueError("an update must carry the 32-byte checksum of its base")
        object.__setattr__(self, "base_checksum", bytes(self.base_checksum))
        object.__setattr__(self, "tensors", tuple(self.tensors))
        check_code_range(self.tensors, self.update_bitwidth)

    @property
    def bitwidth(self) -> int:
        return self.update_bitwidth

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, UpdateModel):
            return NotImplemented
        return (
            self.name == other.name
            and self.base_bitwidth == other.base_bitwidth
            and self.update_bitwidth == other.update_bitwidth
            and self.base_checksum == other.base_checksum
            and len(self.tensors) == len(other.tensors)
            and all(a.same_as(b) for a, b in zip(self.tensors, other.tensors))
        )

    __hash__ = None  # type: ignore[assignment]


def _diffs(high: TensorModel, low: TensorModel):
    require_same_layout(high, low)
    for th, tl in zip(high.tensors, low.tensors):
        yield th, th.values.astype(np.float64) - tl.values.astype(np.float64)


def compute_update(
    high: TensorModel,
    low: TensorModel,
    update_bitwidth: int,
    *,
    base_checksum: bytes | None = None,
    base_bitwidth: int = 0,
) -> UpdateModel:
    """Quantize ``high - low`` per tensor with its own max-abs scale.

    ``base_checksum`` binds the update to the artifact the client holds; it
    defaults to the fingerprint of ``low`` itself.
    """
    if update_bitwidth not in UPDATE_BITWIDTHS:
        raise ValueError(f"update bitwidth must be one of {UPDATE_BITWIDTHS}")
    tensors = []
    for th, delta in _diffs(high, low):
        q, scale = quantize_array(delta, update_bitwidth)
        tensors.append(QTensor(th.name, th.shape, q, scale))
    return UpdateModel(
        high.name,
        base_bitwidth,
        update_bitwidth,
        fingerprint(low) if base_checksum is None else base_checksum,
        tuple(tensors),
    )


def apply_update(low: TensorModel, update: UpdateModel, base_checksum: bytes | None = None) -> TensorModel:
    """Return the proxy ``low + dequantized(update)``.

    ``base_checksum`` identifies the artifact ``low`` came from (defaults to
    ``fingerprint(low)``). Nothing is built unless it matches the update.
    """
    expected = fingerprint(low) if base_checksum is None else bytes(base_checksum)
    if expected != update.base_checksum:
        raise BaseMismatchError("update was computed against a different base model")
    require_same_layout(low, update)
    tensors = []
    for tl, tu in zip(low.tensors, update.tensors):
        delta = tu.qvalues.astype(np.float64) * tu.scale
        tensors.append(Tensor(tl.name, tl.shape, (tl.values.astype(np.float64) + delta).astype(np.float32)))
    return TensorModel(low.name, tuple(tensors))


def update_grid_bound(peak: float, bitwidth: int) -> float:
    """Half a grid step of a max-abs-scaled ``bitwidth`` grid over ``peak``."""
    return peak / qmax_for(bitwidth) / 2


def select_update_bitwidth(high: TensorModel, low: TensorModel, tolerance: float) -> int:
    """Smallest update bitwidth whose grid error stays within ``tolerance``."""
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    peaks = [float(np.abs(d).max()) if d.size else 0.0 for _, d in _diffs(high, low)]
    worst = max(peaks, default=0.0)
    for b in UPDATE_BITWIDTHS:
        if update_grid_bound(worst, b) <= tolerance:
            return b
    return UPDATE_BITWIDTHS[-1]
