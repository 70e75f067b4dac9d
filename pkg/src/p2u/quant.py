"""Per-tensor symmetric uniform quantization.

Codes live on the grid ``q = round_half_even(w * qmax / max|w|)`` with
``qmax = 2**(b-1) - 1``; the most negative code of the b-bit range is never
produced. Scales are stored as float32.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model_store import SUPPORTED_BITWIDTHS, QTensor, QuantizedModel, Tensor, TensorModel

__all__ = [
    "QuantizationSpec",
    "qmax_for",
    "quantize_array",
    "quantize",
    "dequantize",
    "dequantize_array",
    "quantization_error",
]


@dataclass(frozen=True)
class QuantizationSpec:
    bitwidth: int
    rounding: str = "half-even"

    def __post_init__(self):
        if self.bitwidth not in SUPPORTED_BITWIDTHS:
            raise ValueError(f"bitwidth must be one of {SUPPORTED_BITWIDTHS}, got {self.bitwidth}")
        if self.rounding != "half-even":
            raise ValueError("only round-half-to-even is supported")


def _as_spec(spec: QuantizationSpec | int) -> QuantizationSpec:
    return spec if isinstance(spec, QuantizationSpec) else QuantizationSpec(int(spec))


def qmax_for(bitwidth: int) -> int:
    return (1 << (bitwidth - 1)) - 1


def quantize_array(values: np.ndarray, bitwidth: int, scale: float | None = None) -> tuple[np.ndarray, float]:
    """Quantize one array; returns (int64 codes, float32-exact scale).

    With ``scale`` given, codes are ``round(values / scale)`` on that grid
    (used to re-quantize onto a carried-over scale).
    """
    qmax = qmax_for(bitwidth)
    w = np.asarray(values, dtype=np.float64)
    if scale is not None:
        q = np.rint(w / float(np.float32(scale)))
        return np.clip(q, -qmax, qmax).astype(np.int64), float(np.float32(scale))
    peak = float(np.abs(w).max()) if w.size else 0.0
    if peak == 0.0:
        return np.zeros(w.shape, dtype=np.int64), 1.0
    # dividing by the exact peak (not the float32-rounded scale) keeps exact
    # half-way ties, e.g. -0.5 * 7 / 1.0 == -3.5 -> -4
    scale = float(np.float32(peak / qmax))
    if scale < np.finfo(np.float32).tiny:
        # subnormal scales lose relative precision: round the scale up so no
        # code clips, then quantize against the scale actually stored
        if scale < peak / qmax:
            scale = float(np.nextafter(np.float32(scale), np.float32(1)))
        q = np.clip(np.rint(w / scale), -qmax, qmax)
        return q.astype(np.int64), scale
    q = np.clip(np.rint(w * qmax / peak), -qmax, qmax)
    return q.astype(np.int64), scale


def dequantize_array(qvalues: np.ndarray, scale: float) -> np.ndarray:
    return (np.asarray(qvalues, dtype=np.float64) * float(scale)).astype(np.float32)


def quantize(model: TensorModel, spec: QuantizationSpec | int) -> QuantizedModel:
    spec = _as_spec(spec)
    tensors = []
    for t in model.tensors:
        q, scale = quantize_array(t.values, spec.bitwidth)
        tensors.append(QTensor(t.name, t.shape, q, scale))
    return QuantizedModel(model.name, spec.bitwidth, tuple(tensors))


def dequantize(qmodel: QuantizedModel) -> TensorModel:
    return TensorModel(
        qmodel.name,
        tuple(Tensor(t.name, t.shape, dequantize_array(t.qvalues, t.scale)) for t in qmodel.tensors),
    )


def quantization_error(model: TensorModel, spec: QuantizationSpec | int) -> dict[str, float]:
    """Per-tensor max-abs error of a quantize/dequantize round trip."""
    spec = _as_spec(spec)
    out = {}
    for t in model.tensors:
        q, scale = quantize_array(t.values, spec.bitwidth)
        err = np.abs(t.values.astype(np.float64) - dequantize_array(q, scale).astype(np.float64))
        out[t.name] = float(err.max()) if err.size else 0.0
    return out
