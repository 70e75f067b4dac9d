"""Lossless entropy coding of quantized models and precision updates."""
from .bitstream import KIND_MODEL, KIND_UPDATE, Bitstream, decode, decode_timed, encode, encoded_size, warmup

__all__ = ["Bitstream", "encode", "decode", "decode_timed", "encoded_size", "KIND_MODEL", "KIND_UPDATE", "warmup"]
