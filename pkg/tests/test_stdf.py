import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from stllmdf import stdf
from stllmdf.errors import IntegrityError


@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64]),
                  hnp.array_shapes(min_dims=1, max_dims=4, max_side=5)))
def test_roundtrip_bit_exact(arr):
    out = stdf.decode(stdf.encode(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_header_layout():
    buf = stdf.encode(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"STDF"
    assert int.from_bytes(buf[4:6], "little") == 1
    assert buf[6] == 1 and buf[7] == 2
    assert int.from_bytes(buf[8:16], "little") == 2
    assert int.from_bytes(buf[16:24], "little") == 3
    assert len(buf) == 24 + 6 * 4


@pytest.mark.parametrize("mutate,field", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + (9).to_bytes(2, "little") + b[6:], "version"),
    (lambda b: b[:6] + bytes([7]) + b[7:], "dtype"),
    (lambda b: b[:-3], "payload"),
    (lambda b: b[:10], "extents"),
    (lambda b: b[:3], "header"),
])
def test_corruption_names_field(mutate, field):
    buf = stdf.encode(np.ones((2, 2)))
    with pytest.raises(IntegrityError) as info:
        stdf.decode(mutate(buf))
    assert info.value.field == field


def test_bundle_roundtrip(tmp_path):
    arrays = {"a": np.arange(3.0), "b": np.ones((2, 2), np.float32)}
    stdf.save_bundle(tmp_path / "bundle", arrays, {"config_hash": "abc"})
    loaded, manifest = stdf.load_bundle(tmp_path / "bundle")
    assert manifest["config_hash"] == "abc"
    for k, v in arrays.items():
        np.testing.assert_array_equal(loaded[k], v)
        assert loaded[k].dtype == v.dtype


def test_bundle_missing_array(tmp_path):
    stdf.save_bundle(tmp_path, {"a": np.ones(2)})
    (tmp_path / "a.stdf").unlink()
    with pytest.raises(IntegrityError):
        stdf.load_bundle(tmp_path)
