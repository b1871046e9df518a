import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expobracket.errors import DimensionError, FormatError, ParameterError
from expobracket.rawimg import (
    ExposureMeta,
    condition_frame,
    dequantize,
    inverse_tonemap,
    pack_bayer,
    quantize,
    read_raw,
    tonemap,
    unpack_bayer,
    unpack_planes,
    write_raw,
)


def test_pack_2x2_layout():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    p = pack_bayer(m)
    assert p.shape == (4, 1, 1)
    assert p.ravel().tolist() == [1.0, 2.0, 3.0, 4.0]
    assert np.array_equal(unpack_bayer(p), m)


def test_pack_zero_mosaic():
    p = pack_bayer(np.zeros((64, 64)))
    assert p.shape == (4, 32, 32) and not p.any()


def test_pack_round_trip_random():
    m = np.random.default_rng(0).random((8, 8))
    assert np.array_equal(unpack_bayer(pack_bayer(m)), m)
    p = np.random.default_rng(1).random((3, 4, 5, 6))
    assert np.array_equal(pack_bayer(unpack_bayer(p)), p)


def test_pack_sites():
    m = np.arange(36.0).reshape(6, 6)
    p = pack_bayer(m)
    assert p[0, 1, 2] == m[2, 4]
    assert p[1, 1, 2] == m[2, 5]
    assert p[2, 1, 2] == m[3, 4]
    assert p[3, 1, 2] == m[3, 5]


def test_pack_odd_dimensions_rejected():
    with pytest.raises(DimensionError):
        pack_bayer(np.zeros((5, 4)))


def test_unpack_plane_mismatch_rejected():
    with pytest.raises(DimensionError):
        unpack_planes([np.zeros((2, 2))] * 3 + [np.zeros((2, 3))])
    with pytest.raises(DimensionError):
        unpack_bayer(np.zeros((3, 2, 2)))


def test_exposure_meta():
    assert ExposureMeta(index=5, ratio=4).divisor == 256
    assert ExposureMeta(index=3, ratio=4, base_exposure=0.5).exposure == 8.0
    with pytest.raises(ParameterError):
        ExposureMeta(index=1, ratio=1.0)
    with pytest.raises(ParameterError):
        ExposureMeta(index=0)


def test_condition_reference_frame_unchanged():
    x = np.random.default_rng(2).random((4, 6, 6)).astype(np.float32)
    c = condition_frame(x, ExposureMeta(index=1, ratio=7.0))
    assert c.shape == (8, 6, 6)
    assert np.array_equal(c[:4], x)


def test_condition_third_frame_value():
    # reference value evaluated with 50-digit arithmetic
    mpmath.mp.dps = 50
    expected_norm = mpmath.mpf("0.32") / 16
    expected_gamma = expected_norm ** (mpmath.mpf(1) / mpmath.mpf("2.2"))
    x = np.full((4, 1, 1), 0.32)
    c = condition_frame(x, ExposureMeta(index=3, ratio=4))
    assert c[0, 0, 0] == pytest.approx(float(expected_norm), rel=1e-15)
    assert c[4, 0, 0] == pytest.approx(float(expected_gamma), rel=1e-14)
    assert c[4, 0, 0] == pytest.approx(0.169, abs=5e-4)


def test_condition_negative_values_clamped_in_gamma_planes():
    x = np.full((4, 2, 2), -0.1)
    c = condition_frame(x, ExposureMeta(index=2))
    assert np.all(c[:4] < 0)
    assert np.all(c[4:] == 0)


def test_condition_commutes_with_crop():
    x = np.random.default_rng(3).random((4, 10, 12))
    meta = ExposureMeta(index=4)
    assert np.array_equal(condition_frame(x, meta)[:, 2:7, 3:9], condition_frame(x[:, 2:7, 3:9], meta))


def test_tonemap_values():
    mpmath.mp.dps = 30
    assert tonemap(0.0) == 0.0
    assert tonemap(1.0) == pytest.approx(1.0, abs=1e-15)
    expected = mpmath.log(51) / mpmath.log(5001)
    assert tonemap(0.01) == pytest.approx(float(expected), rel=1e-14)
    assert tonemap(0.01) == pytest.approx(0.4616, abs=1e-4)
    assert tonemap(-3.0) == 0.0
    assert tonemap(4.0) > 1.0
    with pytest.raises(ParameterError):
        tonemap(0.5, mu=0)


def test_inverse_tonemap():
    assert inverse_tonemap(0.0) == 0.0
    assert inverse_tonemap(1.0) == pytest.approx(1.0, rel=1e-14)
    grid = np.logspace(-6, 0, 200)
    rel = np.abs(inverse_tonemap(tonemap(grid)) - grid) / grid
    assert rel.max() < 1e-6
    with pytest.raises(ParameterError):
        inverse_tonemap(1.5)
    with pytest.raises(ParameterError):
        inverse_tonemap(-0.1)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 100, allow_nan=False), st.floats(0, 100, allow_nan=False))
def test_tonemap_strictly_monotone(a, b):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    if tonemap(lo) == tonemap(hi):
        # only possible when the pair is closer than float resolution allows
        assert np.nextafter(lo, np.inf) >= hi or hi - lo < 1e-12 * max(hi, 1)
    else:
        assert tonemap(lo) < tonemap(hi)


def test_quantize_examples():
    assert quantize(0.0, 10) == 0
    assert quantize(1.0, 10) == 1023
    assert quantize(0.5, 10) == 512
    assert quantize(1.7, 10) == 1023
    assert quantize(-0.2, 10) == 0
    with pytest.raises(ParameterError):
        quantize(0.5, 0)
    with pytest.raises(ParameterError):
        quantize(0.5, 17)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_quantize_error_bound(bits, values):
    x = np.array(values)
    err = np.abs(dequantize(quantize(x, bits), bits, np.float64) - x)
    assert err.max() <= 0.5 / (2**bits - 1) + 1e-15


def test_raw_file_round_trip(tmp_path):
    planes = np.random.default_rng(4).random((4, 3, 5)).astype(np.float32)
    path = tmp_path / "x.raw"
    write_raw(path, planes)
    data = path.read_bytes()
    assert data[:4] == b"BRK1"
    assert int.from_bytes(data[4:8], "little") == 4
    assert int.from_bytes(data[8:12], "little") == 3
    assert int.from_bytes(data[12:16], "little") == 5
    assert len(data) == 16 + 4 * 4 * 3 * 5
    assert np.array_equal(read_raw(path), planes)


def test_raw_file_errors(tmp_path):
    bad = tmp_path / "bad.raw"
    bad.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(FormatError):
        read_raw(bad)
    write_raw(bad, np.zeros((4, 2, 2), dtype=np.float32))
    bad.write_bytes(bad.read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_raw(bad)
