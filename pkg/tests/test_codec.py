import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import gaussian_model, tensor_models
from p2u.codec import KIND_UPDATE, Bitstream, decode, decode_timed, encode, encoded_size
from p2u.codec.cabac import STATUS_EXHAUSTED, STATUS_OK, decode_codes, encode_codes
from p2u.errors import (
    BadMagicError,
    DigestMismatchError,
    FormatError,
    MalformedHeaderError,
    PayloadExhaustedError,
    UnsupportedVersionError,
)
from p2u.model_store import QTensor, QuantizedModel, TensorModel
from p2u.quant import dequantize, qmax_for, quantize
from p2u.update import UpdateModel, compute_update

BITWIDTHS = (4, 8, 16, 32)
HEADER_FIXED = 4 + 1 + 3  # magic, version, kind/bitwidth/base-bitwidth
TRAILER = 32


def _payload_len(data: bytes) -> int:
    """Walk the header (independently of the decoder) and return payload length."""
    pos = HEADER_FIXED + (32 if data[5] == KIND_UPDATE else 0)
    (n,) = struct.unpack_from("<H", data, pos)
    pos += 2 + n
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2 + n
        rank = data[pos]
        pos += 1 + 4 * rank + 4
    (plen,) = struct.unpack_from("<I", data, pos)
    assert pos + 4 + plen + TRAILER == len(data)
    return plen


def _qmodel(codes, bitwidth, scale=0.5, name="q"):
    codes = np.asarray(codes, dtype=np.int64)
    return QuantizedModel(name, bitwidth, (QTensor("w", codes.shape, codes, scale),))


# --- raw coder --------------------------------------------------------------------


@pytest.mark.parametrize("b", BITWIDTHS)
@pytest.mark.parametrize("n", [0, 1, 5, 1000])
def test_coder_roundtrip(b, n):
    rng = np.random.default_rng(n + b)
    qmax = qmax_for(b)
    codes = rng.integers(-qmax, qmax + 1, size=n, dtype=np.int64)
    data = encode_codes(codes, b)
    back, status, used = decode_codes(data, n, b)
    assert status == STATUS_OK and used == len(data)
    assert np.array_equal(back, codes)


def test_coder_extremes_and_powers_of_two():
    for b in BITWIDTHS:
        qmax = qmax_for(b)
        vals = [0, 1, -1, qmax, -qmax] + [s * (1 << k) for k in range(b - 1) for s in (1, -1)]
        vals += [s * ((1 << k) - 1) for k in range(1, b) for s in (1, -1)]
        codes = np.array(vals, dtype=np.int64)
        back, status, _ = decode_codes(encode_codes(codes, b), len(codes), b)
        assert status == STATUS_OK and np.array_equal(back, codes)


def test_coder_reports_exhaustion():
    codes = np.random.default_rng(0).integers(-100, 100, size=500).astype(np.int64)
    data = encode_codes(codes, 8)
    _, status, _ = decode_codes(data[: len(data) // 2], len(codes), 8)
    assert status == STATUS_EXHAUSTED


# --- bitstreams --------------------------------------------------------------------


def test_tiny_4_bit_example():
    q = quantize(TensorModel.from_arrays("m", {"w": [1.0, -0.5, 0.25]}), 4)
    assert q.tensors[0].qvalues.tolist() == [7, -4, 2]
    back = decode(encode(q))
    assert back.tensors[0].qvalues.tolist() == [7, -4, 2]
    assert back.tensors[0].scale == q.tensors[0].scale
    assert back == q


@pytest.mark.parametrize("b", BITWIDTHS)
@given(m=tensor_models())
def test_model_roundtrip_and_determinism(b, m):
    q = quantize(m, b)
    first, second = encode(q), encode(q)
    assert first.data == second.data
    assert decode(first) == q


@pytest.mark.parametrize("bu", (8, 16, 32))
@given(m=tensor_models(), base=st.sampled_from((4, 8, 16)))
def test_update_roundtrip(bu, m, base):
    low = dequantize(quantize(m, base))
    u = compute_update(m, low, bu, base_checksum=bytes(range(32)), base_bitwidth=base)
    back = decode(encode(u))
    assert isinstance(back, UpdateModel)
    assert back == u
    assert back.base_checksum == bytes(range(32)) and back.base_bitwidth == base


def test_empty_model_is_header_and_trailer_only():
    q = QuantizedModel("empty", 8, ())
    data = encode(q).data
    assert _payload_len(data) == 0
    assert len(data) == HEADER_FIXED + 2 + len("empty") + 4 + 4 + TRAILER
    assert decode(data) == q


def test_all_zero_million_elements_under_two_percent():
    q = _qmodel(np.zeros(1_000_000), 8)
    payload = _payload_len(encode(q).data)
    assert payload < 0.02 * 1_000_000


@pytest.mark.parametrize("b", (4, 8, 16))
def test_incompressible_data_no_free_lunch(b):
    n = 200_000 if b < 16 else 100_000
    qmax = qmax_for(b)
    codes = np.random.default_rng(b).integers(-qmax, qmax + 1, size=n)
    payload = _payload_len(encode(_qmodel(codes, b)).data)
    # empirical entropy of the sample is the real floor; log2(2^b - 1) is its expectation
    assert payload >= 0.98 * oracles.empirical_entropy_bytes(codes)
    assert payload >= 0.98 * oracles.uniform_code_entropy_bytes(n, b)
    assert payload <= 1.02 * n * b / 8


def test_incompressible_32_bit_expansion():
    n = 50_000
    qmax = qmax_for(32)
    codes = np.random.default_rng(1).integers(-qmax, qmax + 1, size=n)
    payload = _payload_len(encode(_qmodel(codes, 32)).data)
    assert 0.98 * oracles.uniform_code_entropy_bytes(n, 32) <= payload <= 1.02 * n * 4


def test_size_increases_with_bitwidth():
    for seed in range(3):
        m = gaussian_model(seed, sizes=((400, 256),), scale=0.05)
        sizes = [encoded_size(quantize(m, b)) for b in (4, 8, 16)]
        assert sizes[0] < sizes[1] < sizes[2]


def test_sparse_near_converged_update_is_small():
    # low sits on an 8-bit grid; high differs from it in 1% of weights
    rng = np.random.default_rng(0)
    base = dequantize(quantize(gaussian_model(0, sizes=((300, 300),), scale=0.05), 8))
    w = base["t0"].astype(np.float64).copy()
    idx = rng.choice(w.size, size=w.size // 100, replace=False)
    w.flat[idx] += rng.normal(0, 1e-3, size=idx.size)
    high = base.with_arrays([w])
    base_size = encoded_size(quantize(base, 8))
    update_size = encoded_size(compute_update(high, base, 32))
    assert update_size < 0.30 * base_size


def test_update_kind_dispatch():
    m = gaussian_model(3)
    u = compute_update(m, dequantize(quantize(m, 4)), 16, base_checksum=b"\x01" * 32, base_bitwidth=4)
    data = encode(u).data
    assert data[5] == KIND_UPDATE
    back, seconds = decode_timed(data)
    assert isinstance(back, UpdateModel) and back.base_checksum == b"\x01" * 32
    assert seconds >= 0


def test_bitstream_metadata():
    bs = encode(quantize(gaussian_model(1), 8))
    assert isinstance(bs, Bitstream)
    assert bs.size == len(bs.data) == len(bs)
    assert bs.encode_seconds > 0
    assert len(bs.checksum) == 32
    assert encoded_size(quantize(gaussian_model(1), 8)) == bs.size


# --- failures -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def stream():
    return encode(quantize(gaussian_model(4), 8)).data


def test_truncated_payload_is_exhaustion(stream):
    for cut in (1, 10, 40, len(stream) // 2, len(stream) - 4):
        with pytest.raises(PayloadExhaustedError):
            decode(stream[:cut])


def test_every_truncation_is_exhaustion(stream):
    for n in range(0, len(stream), 7):
        with pytest.raises(PayloadExhaustedError):
            decode(stream[:n])


def test_flipped_payload_byte_is_digest_mismatch(stream):
    bad = bytearray(stream)
    bad[-40] ^= 0x10
    with pytest.raises(DigestMismatchError):
        decode(bytes(bad))


def test_header_errors(stream):
    with pytest.raises(BadMagicError):
        decode(b"P2UM" + stream[4:])
    with pytest.raises(UnsupportedVersionError):
        decode(stream[:4] + b"\x09" + stream[5:])
    with pytest.raises(MalformedHeaderError):
        decode(stream[:5] + b"\x07" + stream[6:])  # unknown kind
    with pytest.raises(MalformedHeaderError):
        decode(stream[:6] + b"\x05" + stream[7:])  # bitwidth 5
    with pytest.raises(MalformedHeaderError):
        decode(stream + b"\x00")


def test_coder_overrun_inside_valid_digest_is_exhaustion():
    # a stream whose digest is valid but whose payload is too short for its codes
    import hashlib

    data = encode(_qmodel(np.arange(-100, 100), 8)).data
    plen = _payload_len(data)
    body = data[: -TRAILER - plen]
    body = body[:-4] + struct.pack("<I", 3) + data[-TRAILER - plen : -TRAILER - plen + 3]
    forged = body + hashlib.sha256(body).digest()
    with pytest.raises(PayloadExhaustedError):
        decode(forged)


def test_every_single_byte_corruption_is_detected(stream):
    for i in range(len(stream)):
        bad = bytearray(stream)
        bad[i] ^= 0xA5
        with pytest.raises(FormatError):
            decode(bytes(bad))
