import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import tensor_models
from p2u.errors import (
    BadMagicError,
    DigestMismatchError,
    FormatError,
    ModelMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from p2u.model_store import (
    ModelManifest,
    QTensor,
    QuantizedModel,
    TensorModel,
    load_model,
    model_delta_norms,
    model_from_bytes,
    model_to_bytes,
    save_model,
)
from p2u.quant import dequantize, quantize


def test_single_zero_tensor_roundtrip(tmp_path):
    m = TensorModel.from_arrays("m", {"w": [0.0, 0.0]})
    path = tmp_path / "m.p2um"
    save_model(m, path)
    # magic + version + name(4+1) + count + name(4+1) + rank + dim + 2 floats + digest
    assert path.stat().st_size == 4 + 4 + 5 + 4 + 5 + 4 + 4 + 8 + 32
    assert load_model(path) == m


def test_bytes_match_field_by_field_oracle():
    m = TensorModel.from_arrays("net", [("b", np.arange(6.0).reshape(2, 3)), ("a", [1.5])])
    expect = oracles.p2um_bytes("net", [("b", (2, 3), [0, 1, 2, 3, 4, 5]), ("a", (1,), [1.5])])
    assert model_to_bytes(m) == expect


def test_insertion_order_is_kept(tmp_path):
    m = TensorModel.from_arrays("m", [("b", [1.0, 2.0, 3.0]), ("a", [4.0])])
    save_model(m, tmp_path / "m.p2um")
    assert load_model(tmp_path / "m.p2um").names == ["b", "a"]


@settings(max_examples=40)
@given(tensor_models())
def test_roundtrip_is_bit_exact(m):
    assert model_from_bytes(model_to_bytes(m)) == m


def test_thousand_tensor_roundtrip():
    rng = np.random.default_rng(7)
    arrays = [(f"t{i}", rng.standard_normal(tuple(rng.integers(1, 5, size=rng.integers(1, 4))))) for i in range(1000)]
    m = TensorModel.from_arrays("big", arrays)
    back = model_from_bytes(model_to_bytes(m))
    assert back == m
    for a, b in zip(m.tensors, back.tensors):
        assert a.values.tobytes() == b.values.tobytes()


def test_saving_twice_is_byte_identical(tmp_path, small_model):
    save_model(small_model, tmp_path / "a")
    save_model(small_model, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_special_values_survive():
    vals = np.array([-0.0, 0.0, np.finfo(np.float32).tiny / 4, np.finfo(np.float32).max, -1e-38], np.float32)
    m = TensorModel.from_arrays("m", {"x": vals})
    assert model_from_bytes(model_to_bytes(m))["x"].tobytes() == vals.tobytes()


def test_non_finite_rejected_before_write(tmp_path):
    with pytest.raises(ValueError):
        TensorModel.from_arrays("m", {"x": [1.0, np.nan]})
    assert not (tmp_path / "m").exists()


def test_invariants():
    with pytest.raises(ValueError):
        TensorModel.from_arrays("m", [("x", [1.0]), ("x", [2.0])])
    with pytest.raises(ValueError):
        TensorModel.from_arrays("m", {"x": np.zeros((0, 3))})


def test_models_are_immutable(small_model):
    with pytest.raises(ValueError):
        small_model["t0"][0, 0] = 1.0


# --- errors -------------------------------------------------------------------


def test_flipped_value_byte_is_digest_mismatch():
    m = TensorModel.from_arrays("m", {"w": np.arange(10.0)})
    data = bytearray(model_to_bytes(m))
    data[-32 - 5] ^= 0x01
    with pytest.raises(DigestMismatchError):
        model_from_bytes(bytes(data))


def test_empty_file_is_truncated(tmp_path):
    (tmp_path / "e").write_bytes(b"")
    with pytest.raises(TruncatedFileError):
        load_model(tmp_path / "e")


def test_bad_magic_and_version():
    data = model_to_bytes(TensorModel.from_arrays("m", {"w": [1.0]}))
    with pytest.raises(BadMagicError):
        model_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        model_from_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])


def test_error_kinds_are_distinct():
    kinds = {BadMagicError, UnsupportedVersionError, DigestMismatchError, TruncatedFileError}
    assert len(kinds) == 4
    for k in kinds:
        assert issubclass(k, FormatError)
        assert not any(issubclass(k, o) for o in kinds - {k})


def test_every_truncation_is_detected():
    data = model_to_bytes(TensorModel.from_arrays("m", {"a": np.arange(4.0), "b": [[1.0, 2.0]]}))
    for n in range(len(data)):
        with pytest.raises(TruncatedFileError):
            model_from_bytes(data[:n])


def test_every_single_byte_corruption_is_detected():
    data = model_to_bytes(TensorModel.from_arrays("m", {"a": np.arange(4.0), "b": [[1.0, 2.0]]}))
    for i in range(len(data)):
        bad = bytearray(data)
        bad[i] ^= 0x5A
        with pytest.raises(FormatError):
            model_from_bytes(bytes(bad))


# --- delta norms ----------------------------------------------------------------


def test_delta_norms_identical(small_model):
    d = model_delta_norms(small_model, small_model)
    assert d.global_max == 0
    assert all(v == (0.0, 0.0) for v in d.per_tensor.values())


def test_delta_norms_single_element():
    d = model_delta_norms(TensorModel.from_arrays("a", {"x": [1.0]}), TensorModel.from_arrays("b", {"x": [0.5]}))
    assert d.per_tensor["x"] == (0.5, 0.5)
    assert d.global_max == 0.5


def test_delta_norms_mismatch():
    with pytest.raises(ModelMismatchError):
        model_delta_norms(TensorModel.from_arrays("a", {"x": [1.0]}), TensorModel.from_arrays("a", {"y": [1.0]}))
    with pytest.raises(ModelMismatchError):
        model_delta_norms(TensorModel.from_arrays("a", {"x": [1.0]}), TensorModel.from_arrays("a", {"x": [1.0, 2.0]}))


@given(st.integers(0, 10_000))
def test_delta_of_8bit_roundtrip_within_half_step(seed):
    rng = np.random.default_rng(seed)
    m = TensorModel.from_arrays("m", {"a": rng.normal(size=50), "b": rng.uniform(-3, 3, size=(4, 5))})
    q = quantize(m, 8)
    low = dequantize(q)
    d = model_delta_norms(m, low)
    # brute force per element against each tensor's own scale
    for t, qt, lt in zip(m.tensors, q.tensors, low.tensors):
        err = np.abs(t.values.astype(np.float64) - lt.values.astype(np.float64))
        slack = 2 * np.spacing(np.abs(lt.values)).astype(np.float64)
        assert np.all(err <= qt.scale / 2 + slack)
    assert d.global_max <= max(t.scale for t in q.tensors) / 2 * (1 + 1e-6)


# --- quantized containers and manifests -------------------------------------------------


def test_quantized_model_code_range_enforced():
    with pytest.raises(ValueError):
        QuantizedModel("m", 4, (QTensor("x", (1,), np.array([8]), 1.0),))
    with pytest.raises(ValueError):
        QuantizedModel("m", 4, (QTensor("x", (1,), np.array([-8]), 1.0),))
    QuantizedModel("m", 4, (QTensor("x", (2,), np.array([-7, 7]), 1.0),))
    with pytest.raises(ValueError):
        QuantizedModel("m", 5, ())


def test_manifest_requires_entries_per_bitwidth():
    ModelManifest("m", {8: 10}, {8: b"\0" * 32})
    with pytest.raises(ValueError):
        ModelManifest("m", {8: 10, 4: 3}, {8: b"\0" * 32})
