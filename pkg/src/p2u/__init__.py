"""Progressive precision delivery of neural-network weights: ship a low-bit
model first, then a precision update that restores a high-precision proxy."""

__version__ = "0.1.0"

from .channel import DEFAULT_CHANNEL, ChannelConfig, TransferReport, bandwidth_requirement, channel_time
from .codec import Bitstream, decode, encode, encoded_size
from .model_store import QuantizedModel, TensorModel, load_model, model_delta_norms, save_model
from .quant import QuantizationSpec, dequantize, quantization_error, quantize
from .update import UpdateModel, apply_update, compute_update, select_update_bitwidth

__all__ = [
    "Bitstream",
    "ChannelConfig",
    "DEFAULT_CHANNEL",
    "QuantizationSpec",
    "QuantizedModel",
    "TensorModel",
    "TransferReport",
    "UpdateModel",
    "apply_update",
    "bandwidth_requirement",
    "channel_time",
    "compute_update",
    "decode",
    "dequantize",
    "encode",
    "encoded_size",
    "load_model",
    "model_delta_norms",
    "quantization_error",
    "quantize",
    "save_model",
    "select_update_bitwidth",
]
