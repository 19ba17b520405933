import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from forestwsl.raster_core import (
    ClassMap,
    Raster,
    RasterFormatError,
    decode_raster,
    export_png,
    median_composite,
    raster_bytes_equal,
    read_classmap,
    read_raster,
    write_classmap,
    write_raster,
)


def _pixel_stack(values, nodata=np.float32("nan")):
    return [Raster(np.full((1, 1, 1), v, dtype=np.float32), nodata=nodata) for v in values]


@pytest.mark.parametrize(
    "values, expected",
    [([3.0, 1.0, 2.0], 2.0), ([1.0, 3.0], 2.0), ([1.0, np.nan, 5.0], 3.0)],
)
def test_median_examples(values, expected):
    assert median_composite(_pixel_stack(values)).data[0, 0, 0] == expected


def test_median_numeric_nodata_and_all_missing():
    out = median_composite(_pixel_stack([-9999.0, 4.0, -9999.0], nodata=-9999.0))
    assert out.data[0, 0, 0] == 4.0
    out = median_composite(_pixel_stack([-9999.0, -9999.0], nodata=-9999.0))
    assert out.data[0, 0, 0] == -9999.0
    out = median_composite(_pixel_stack([np.nan, np.nan]))
    assert np.isnan(out.data[0, 0, 0])


def test_median_per_band_independent():
    a = Raster(np.array([[[1.0]], [[10.0]]]))
    b = Raster(np.array([[[3.0]], [[np.nan]]]))
    c = Raster(np.array([[[2.0]], [[30.0]]]))
    out = median_composite([a, b, c])
    assert out.data[:, 0, 0].tolist() == [2.0, 20.0]


def test_median_errors():
    with pytest.raises(ValueError):
        median_composite([])
    with pytest.raises(ValueError):
        median_composite([Raster(np.zeros((1, 2, 2))), Raster(np.zeros((1, 2, 3)))])


def test_median_permutation_invariant_and_single_identity():
    rng = np.random.default_rng(3)
    stack = [Raster(rng.normal(size=(2, 5, 4))) for _ in range(5)]
    ref = median_composite(stack)
    for perm in itertools.islice(itertools.permutations(range(5)), 20):
        assert raster_bytes_equal(median_composite([stack[i] for i in perm]), ref)
    assert raster_bytes_equal(median_composite(stack[:1]), stack[0])


def test_round_trip_with_nan(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    data[1, 2, 3] = np.nan
    r = Raster(data)
    write_raster(r, tmp_path / "r.wslr")
    assert raster_bytes_equal(read_raster(tmp_path / "r.wslr"), r)


def test_nan_payload_survives(tmp_path):
    payload = np.array([0x7FC00123], dtype=np.uint32).view(np.float32)
    data = np.zeros((1, 1, 2), dtype=np.float32)
    data[0, 0, 1] = payload[0]
    r = Raster(data, nodata=payload[0])
    write_raster(r, tmp_path / "p.wslr")
    back = read_raster(tmp_path / "p.wslr")
    assert back.data.view(np.uint32)[0, 0, 1] == 0x7FC00123
    assert back.nodata.view(np.uint32) == 0x7FC00123


def test_bad_magic(tmp_path):
    r = Raster(np.zeros((1, 2, 2)))
    write_raster(r, tmp_path / "r.wslr")
    blob = bytearray((tmp_path / "r.wslr").read_bytes())
    blob[:4] = b"XXXX"
    with pytest.raises(RasterFormatError, match="magic"):
        decode_raster(bytes(blob))


def test_truncated_data():
    header = struct.pack("<4sHHIIf", b"WSLR", 1, 1, 2, 5, 0.0)
    with pytest.raises(RasterFormatError, match="truncated"):
        decode_raster(header + np.zeros(9, dtype="<f4").tobytes())
    assert decode_raster(header + np.zeros(10, dtype="<f4").tobytes()).data.shape == (1, 2, 5)
    with pytest.raises(RasterFormatError, match="trailing"):
        decode_raster(header + np.zeros(11, dtype="<f4").tobytes())


def test_dimension_overflow_and_short_header():
    header = struct.pack("<4sHHIIf", b"WSLR", 1, 65535, 2**32 - 1, 2**32 - 1, 0.0)
    with pytest.raises(RasterFormatError, match="overflow"):
        decode_raster(header)
    with pytest.raises(RasterFormatError, match="truncated header"):
        decode_raster(b"WSLR\x01")


def test_header_layout(tmp_path):
    write_raster(Raster(np.zeros((3, 4, 5)), nodata=-1.0), tmp_path / "r.wslr")
    blob = (tmp_path / "r.wslr").read_bytes()
    assert struct.unpack_from("<4sHHIIf", blob) == (b"WSLR", 1, 3, 4, 5, -1.0)
    assert len(blob) == 20 + 4 * 60


finite_or_nan = st.floats(width=32, allow_nan=True, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(
    shape=st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)),
    data=st.data(),
    nodata=st.one_of(st.just(float("nan")), st.floats(width=32, allow_nan=False, allow_infinity=False)),
)
def test_round_trip_property(tmp_path_factory, shape, data, nodata):
    values = data.draw(st.lists(finite_or_nan, min_size=int(np.prod(shape)), max_size=int(np.prod(shape))))
    r = Raster(np.array(values, dtype=np.float32).reshape(shape), nodata=nodata)
    path = tmp_path_factory.mktemp("rt") / "r.wslr"
    write_raster(r, path)
    assert raster_bytes_equal(read_raster(path), r)


def test_classmap_codes_and_round_trip(tmp_path):
    cm = ClassMap(np.array([[0, 1], [255, 1]]))
    write_classmap(cm, tmp_path / "c.wslr")
    assert np.array_equal(read_classmap(tmp_path / "c.wslr").values, cm.values)
    with pytest.raises(ValueError):
        ClassMap(np.array([[0, 2]]))
    with pytest.raises(ValueError):
        ClassMap(np.array([[-1, 0]]))
    with pytest.raises(ValueError):
        ClassMap(np.array([[0.5, 0.0]]))


def _rgb(path):
    return np.asarray(Image.open(path).convert("RGB"))


def test_png_palette(tmp_path):
    export_png(ClassMap(np.array([[1]])), tmp_path / "a.png")
    assert _rgb(tmp_path / "a.png")[0, 0].tolist() == [0, 100, 0]
    export_png(ClassMap(np.array([[0], [255]])), tmp_path / "b.png")
    img = _rgb(tmp_path / "b.png")
    assert img.shape == (2, 1, 3)
    assert img[:, 0].tolist() == [[210, 180, 140], [128, 128, 128]]
    assert Image.open(tmp_path / "b.png").mode == "P"


def test_png_empty_and_unwritable(tmp_path):
    with pytest.raises(ValueError):
        export_png(ClassMap(np.zeros((0, 0), dtype=np.uint8)), tmp_path / "e.png")
    with pytest.raises(OSError):
        export_png(ClassMap(np.zeros((2, 2), dtype=np.uint8)), tmp_path / "missing" / "x.png")


def test_png_byte_stable(tmp_path):
    cm = ClassMap(np.random.default_rng(0).integers(0, 2, size=(16, 16)))
    export_png(cm, tmp_path / "1.png")
    export_png(cm, tmp_path / "2.png")
    assert (tmp_path / "1.png").read_bytes() == (tmp_path / "2.png").read_bytes()
