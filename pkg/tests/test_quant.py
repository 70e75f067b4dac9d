import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from p2u.model_store import QTensor, QuantizedModel, TensorModel
from p2u.quant import (
    QuantizationSpec,
    dequantize,
    dequantize_array,
    qmax_for,
    quantization_error,
    quantize,
    quantize_array,
)

BITWIDTHS = (4, 8, 16, 32)

finite32 = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, width=32)
arrays32 = hnp.arrays(np.float32, st.integers(1, 64), elements=finite32)


def _model(values):
    return TensorModel.from_arrays("m", {"w": np.asarray(values, np.float32)})


def test_all_zero_tensor():
    q = quantize(_model([0, 0, 0]), QuantizationSpec(8))
    assert q.tensors[0].qvalues.tolist() == [0, 0, 0]
    assert q.tensors[0].scale == 1.0
    assert dequantize(q)["w"].tolist() == [0.0, 0.0, 0.0]
    assert quantization_error(_model([0, 0, 0]), 8) == {"w": 0.0}


def test_half_even_example_at_4_bit():
    q = quantize(_model([1.0, -0.5, 0.25]), 4).tensors[0]
    assert q.qvalues.tolist() == [7, -4, 2]
    assert q.scale == float(np.float32(1 / 7))
    codes, _ = oracles.quantize_exact([1.0, -0.5, 0.25], 4)
    assert codes == [7, -4, 2]


@pytest.mark.parametrize("b", BITWIDTHS)
def test_extremes_map_to_range_ends(b):
    q = quantize(_model([-2.0, 2.0]), b).tensors[0]
    assert q.qvalues.tolist() == [-qmax_for(b), qmax_for(b)]


def test_dequantize_example():
    q = QuantizedModel("m", 4, (QTensor("w", (3,), np.array([7, -4, 2]), 1 / 7),))
    out = dequantize(q)["w"]
    s = float(np.float32(1 / 7))
    expect = np.array([7 * s, -4 * s, 2 * s], dtype=np.float32)  # direct multiplication
    assert out.tolist() == expect.tolist()
    assert np.allclose(out, [1.0, -0.5714285714, 0.2857142857], rtol=1e-6)


def test_spec_validation():
    with pytest.raises(ValueError):
        QuantizationSpec(5)
    with pytest.raises(ValueError):
        QuantizationSpec(8, rounding="stochastic")


@pytest.mark.parametrize("b", (4, 8, 16))
@given(values=arrays32)
def test_codes_match_exact_rational_oracle(b, values):
    codes, scale = quantize_array(values, b)
    expect, exact_scale = oracles.quantize_exact(values, b)
    assert codes.tolist() == expect
    assert scale == float(np.float32(exact_scale))


@given(values=arrays32)
def test_32_bit_codes_within_one_of_exact(values):
    # w * qmax is no longer exact in float64 at 31-bit qmax
    codes, _ = quantize_array(values, 32)
    expect, _ = oracles.quantize_exact(values, 32)
    assert np.max(np.abs(codes - np.array(expect, dtype=np.int64))) <= 1


@pytest.mark.parametrize("b", BITWIDTHS)
@given(values=arrays32)
def test_error_bound(b, values):
    codes, scale = quantize_array(values, b)
    back = dequantize_array(codes, scale).astype(np.float64)
    err = np.abs(values.astype(np.float64) - back)
    # half a step, plus float32 rounding of the product (2 ULP) and of the scale itself
    peak = float(np.abs(values).max())
    slack = 2 * np.spacing(np.abs(back)) + np.abs(codes) * abs(scale - peak / qmax_for(b) if peak else 0.0)
    assert np.all(err <= scale / 2 + slack + 1e-300)


@pytest.mark.parametrize("b", BITWIDTHS)
@given(values=arrays32)
def test_codes_in_symmetric_range(b, values):
    codes, _ = quantize_array(values, b)
    assert np.all(np.abs(codes) <= qmax_for(b))


@pytest.mark.parametrize("b", BITWIDTHS)
@given(values=arrays32)
def test_symmetry(b, values):
    pos, s1 = quantize_array(values, b)
    neg, s2 = quantize_array(-values, b)
    assert s1 == s2
    assert np.array_equal(neg, -pos)


@pytest.mark.parametrize("b", (4, 8, 16))
@given(values=arrays32)
def test_idempotent_with_carried_scale(b, values):
    codes, scale = quantize_array(values, b)
    again, s = quantize_array(dequantize_array(codes, scale), b, scale=scale)
    assert s == scale
    assert np.array_equal(again, codes)


@given(st.integers(0, 2**32 - 1), st.integers(2, 2000))
def test_error_monotone_in_bitwidth_on_gaussian_data(seed, n):
    w = np.random.default_rng(seed).normal(size=n)
    errs = [quantization_error(_model(w), b)["w"] for b in (4, 8, 16)]
    assert errs[2] <= errs[1] <= errs[0]


def test_grid_aligned_values_can_break_monotonicity():
    # 3/7 lies on the 4-bit grid but between 8-bit grid points
    w = np.array([1.0, 3 / 7], np.float32)
    e4 = quantization_error(_model(w), 4)["w"]
    e8 = quantization_error(_model(w), 8)["w"]
    assert e4 < e8


def test_32_bit_error_bound():
    w = np.random.default_rng(3).normal(size=10_000).astype(np.float32)
    codes, scale = quantize_array(w, 32)
    err = np.abs(w.astype(np.float64) - dequantize_array(codes, scale).astype(np.float64))
    # float32 storage of the result dominates the sub-ULP grid error
    assert np.all(err <= np.abs(w).max() / (2**31 - 1) / 2 + np.spacing(np.abs(w)))


def test_model_level_shapes_and_order():
    m = TensorModel.from_arrays("net", [("z", np.ones((2, 3))), ("a", [0.5, -1.0])])
    q = quantize(m, 8)
    assert q.names == ["z", "a"] and q.bitwidth == 8
    assert q.tensors[0].shape == (2, 3)
    back = dequantize(q)
    assert back.names == m.names and back["z"].shape == (2, 3)


def test_subnormal_peak_keeps_positive_scale():
    w = np.array([1e-45, -1e-45], np.float32)
    codes, scale = quantize_array(w, 8)
    assert scale > 0
    assert np.all(np.abs(codes) <= qmax_for(8))
