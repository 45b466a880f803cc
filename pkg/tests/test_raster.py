import json

import numpy as np
import pytest

from app.models.raster import BandSet, GeoRaster, GeoTransform, acres
from app.services.raster_io import read_raster, read_png_mask, write_png_mask, write_raster
from app.services.raster_service import (
    align,
    false_color_composite,
    resample,
    stretch_to_u8,
    uncovered_fraction,
)
from app.services.softmask_service import block_fraction
from app.utils.errors import (
    AlignmentError,
    CoverageError,
    DataValidationError,
    ParameterError,
    RasterFormatError,
    SchemaError,
)
from tests.conftest import make_raster


def test_pixel_center_convention():
    transform = GeoTransform(100.0, 200.0, 10.0, 10.0)
    x, y = transform.pixel_to_ground(0, 0)
    assert (float(x), float(y)) == (105.0, 195.0)

    col, row = transform.ground_to_pixel(125.0, 175.0)
    assert (float(col), float(row)) == (2.0, 2.0)
    assert transform.extent(3, 2) == (100.0, 180.0, 130.0, 200.0)


def test_transform_rejects_bad_pixel_size():
    with pytest.raises(ParameterError):
        GeoTransform(0.0, 0.0, 0.0, 1.0)


def test_raster_is_read_only():
    raster = make_raster(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        raster.data[0, 0, 0] = 1


def test_raster_rejects_non_finite():
    with pytest.raises(DataValidationError):
        make_raster(np.array([[np.nan, 1.0]]))


def test_block_average_downscale():
    src = make_raster(np.arange(1, 17, dtype=np.float32).reshape(4, 4), pixel=1.0)
    target = src.transform.scaled(2)

    out = resample(src, target, 2, 2, method="block-average")

    assert out.dtype == "f32"
    np.testing.assert_allclose(out.band(0).reshape(-1), [3.5, 5.5, 11.5, 13.5])
    assert out.nodata is None


def test_block_average_requires_integer_ratio():
    src = make_raster(np.zeros((4, 4), dtype=np.float32), pixel=1.0)
    with pytest.raises(ParameterError):
        resample(src, src.transform.scaled(1.5), 2, 2, method="block-average")


def test_nearest_upsample_duplicates_pixels():
    src = make_raster(np.array([[1, 2], [3, 4]], dtype=np.uint8), pixel=2.0)
    target = GeoTransform(src.transform.origin_x, src.transform.origin_y, 1.0, 1.0)

    out = resample(src, target, 4, 4, method="nearest")

    expected = np.repeat(np.repeat(np.array([[1, 2], [3, 4]]), 2, axis=0), 2, axis=1)
    assert out.dtype == "u8"
    np.testing.assert_array_equal(out.band(0), expected)


def test_bilinear_of_constant_is_constant():
    src = make_raster(np.full((3, 3), 0.25, dtype=np.float32), pixel=2.0)
    target = GeoTransform(src.transform.origin_x, src.transform.origin_y, 1.0, 1.0)

    out = resample(src, target, 6, 6, method="bilinear")

    np.testing.assert_allclose(out.band(0), 0.25)


def test_resample_outside_source_is_nodata():
    src = make_raster(np.ones((2, 2), dtype=np.uint8), pixel=1.0)
    shifted = src.transform.shifted(1, 0)

    out = resample(src, shifted, 2, 2, method="nearest")

    assert out.nodata == 255
    np.testing.assert_array_equal(out.band(0), [[1, 255], [1, 255]])


def test_align_identity_returns_source():
    src = make_raster(np.ones((3, 3), dtype=np.float32))
    assert align(src, src) is src


def test_align_rejects_uncovered_reference():
    src = make_raster(np.ones((2, 2), dtype=np.float32), pixel=1.0)
    ref = make_raster(np.ones((4, 4), dtype=np.float32), pixel=1.0)

    with pytest.raises(CoverageError) as info:
        align(src, ref)
    assert info.value.uncovered_fraction == pytest.approx(0.75)
    assert uncovered_fraction(src, ref) == pytest.approx(0.75)


def test_align_rejects_crs_mismatch():
    src = make_raster(np.ones((2, 2), dtype=np.float32), crs="EPSG:32611")
    ref = make_raster(np.ones((2, 2), dtype=np.float32), crs="EPSG:4326")
    with pytest.raises(AlignmentError):
        align(src, ref)


def test_grf_round_trip(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    data[1, 0, 0] = -9999.0
    raster = make_raster(data, nodata=-9999.0, band_names=("a", "b"))

    path = write_raster(raster, tmp_path / "r.grf")

    assert (tmp_path / "r.bin").stat().st_size == data.nbytes
    loaded = read_raster(path)
    assert loaded == raster
    assert loaded.valid_mask().sum() == 11


def test_grf_sidecar_is_sorted_json(tmp_path):
    path = write_raster(make_raster(np.zeros((1, 2), dtype=np.uint8)), tmp_path / "r.grf")
    header = json.loads(path.read_text())
    assert list(header) == sorted(header)
    assert header["transform"] == [500000.0, 10.0, 0.0, 4100000.0, 0.0, -10.0]


def test_grf_truncated_binary(tmp_path):
    path = write_raster(make_raster(np.zeros((3, 3), dtype=np.float32)), tmp_path / "r.grf")
    (tmp_path / "r.bin").write_bytes(b"\x00" * 5)
    with pytest.raises(RasterFormatError):
        read_raster(path)


def test_grf_invalid_header(tmp_path):
    path = write_raster(make_raster(np.zeros((3, 3), dtype=np.float32)), tmp_path / "r.grf")
    header = json.loads(path.read_text())
    header["dtype"] = "f64"
    path.write_text(json.dumps(header))
    with pytest.raises(SchemaError):
        read_raster(path)


def test_missing_raster(tmp_path):
    with pytest.raises(RasterFormatError):
        read_raster(tmp_path / "nope.grf")


def test_png_mask_round_trip(tmp_path):
    mask = make_raster(np.array([[0, 1, 1], [1, 0, 0]], dtype=np.uint8), pixel=0.05)

    path = write_png_mask(mask, tmp_path / "mask.png")
    loaded = read_png_mask(path)

    np.testing.assert_array_equal(loaded.band(0), mask.band(0))
    assert loaded.transform == mask.transform
    assert loaded.crs == mask.crs


def test_png_mask_without_sidecar_has_no_transform(tmp_path):
    mask = GeoRaster(data=np.array([[0, 1]], dtype=np.uint8), transform=None)
    path = write_png_mask(mask, tmp_path / "mask.png")
    assert read_png_mask(path).transform is None


def test_stretch_rounding():
    values = np.array([0.0, 50.0, 100.0, -10.0, 200.0])
    np.testing.assert_array_equal(stretch_to_u8(values, 0.0, 100.0), [0, 128, 255, 0, 255])

    with pytest.raises(ParameterError):
        stretch_to_u8(values, 1.0, 1.0)


def test_false_color_composite_endpoints():
    band = np.array([[0.0, 50.0, 100.0]], dtype=np.float32)
    data = np.stack([band] * len(BandSet.ROLES))
    sat = make_raster(data, band_names=BandSet.ROLES)
    bounds = {role: (0.0, 100.0) for role in ("nir", "green", "vre2")}

    composite = false_color_composite(sat, bounds=bounds)

    assert composite.dtype == "u8"
    assert composite.band_names == ("nir", "green", "vre2")
    for channel in range(3):
        np.testing.assert_array_equal(composite.band(channel), [[0, 128, 255]])


def test_composite_uses_band_roles(satellite):
    composite = false_color_composite(satellite, mapping=("red", "red", "blue"))
    np.testing.assert_array_equal(composite.band(0), composite.band(1))


def test_composite_unknown_role(satellite):
    with pytest.raises(ParameterError):
        false_color_composite(satellite, mapping=("nir", "green", "uv"))


def test_band_set_from_csv_column_names():
    bands = BandSet.from_band_names(list(reversed(BandSet.COLUMNS)))
    assert bands["blue"] == 9
    assert bands["swir2"] == 0


def test_acres():
    assert acres(4046.8564224) == pytest.approx(1.0)


def test_nearest_upsample_keeps_binary_mask_values():
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[1:3, 2:4] = 255
    src = make_raster(mask, pixel=1.0)
    target = GeoTransform(src.transform.origin_x, src.transform.origin_y, 0.5, 0.5)

    out = resample(src, target, 8, 8, method="nearest")

    assert out.nodata is None
    assert out.valid_mask().sum() == 64
    np.testing.assert_array_equal(block_fraction(out, 2).band(0), mask / 255.0)


def test_outside_nodata_avoids_values_in_the_data():
    src = make_raster(np.array([[0, 255], [255, 0]], dtype=np.uint8), pixel=1.0)

    out = resample(src, src.transform.shifted(1, 0), 2, 2, method="nearest")

    assert out.nodata == 254
    np.testing.assert_array_equal(out.band(0), [[255, 254], [0, 254]])
    np.testing.assert_array_equal(out.valid_mask(), [[True, False], [True, False]])


def test_outside_nodata_needs_a_free_u8_value():
    every_value = np.arange(256).reshape(16, 16)
    src = make_raster(np.concatenate([every_value[:, :1], every_value], axis=1).astype(np.uint8), pixel=1.0)
    with pytest.raises(ParameterError):
        resample(src, src.transform.shifted(1, 0), 17, 16, method="nearest")


def test_bilinear_outside_source_gets_default_nodata():
    src = make_raster(np.full((2, 2), 0.5, dtype=np.float32), pixel=1.0)

    out = resample(src, src.transform.shifted(2, 0), 2, 2, method="bilinear")

    assert out.nodata == -9999.0
    assert not out.valid_mask().any()


@pytest.mark.parametrize("seed", range(20))
def test_block_average_conserves_mass(seed):
    rng = np.random.default_rng(seed)
    factor = int(rng.integers(2, 6))
    h, w = factor * int(rng.integers(1, 6)), factor * int(rng.integers(1, 6))
    src = make_raster(rng.random((h, w)).astype(np.float32), pixel=1.0)

    out = resample(src, src.transform.scaled(factor), w // factor, h // factor, method="block-average")

    assert out.nodata is None
    assert float(out.band(0).astype(np.float64).sum()) * factor * factor == pytest.approx(
        float(src.band(0).astype(np.float64).sum()), rel=1e-5
    )


@pytest.mark.parametrize("seed", range(20))
def test_nearest_output_values_come_from_source(seed):
    rng = np.random.default_rng(seed)
    src = make_raster(rng.integers(0, 200, (7, 9)).astype(np.uint8), pixel=3.0)
    origin = (src.transform.origin_x + rng.uniform(-4, 4), src.transform.origin_y + rng.uniform(-4, 4))
    target = GeoTransform(origin[0], origin[1], 1.7, 1.7)

    out = resample(src, target, 17, 13, method="nearest")

    values = set(np.unique(out.band(0)[out.valid_mask()]).tolist())
    assert values <= set(np.unique(src.band(0)).tolist())


@pytest.mark.parametrize("method", ["nearest", "bilinear", "block-average"])
def test_align_is_idempotent(method):
    rng = np.random.default_rng(4)
    src = make_raster(rng.random((6, 6)).astype(np.float32), pixel=1.0)
    ref = make_raster(np.zeros((3, 3), dtype=np.float32), pixel=2.0)

    once = align(src, ref, method=method)
    twice = align(once, ref, method=method)

    assert once.same_grid(ref)
    assert twice == once


@pytest.mark.parametrize("k", [1, 2, 3])
def test_shift_by_whole_pixels_translates(k):
    rng = np.random.default_rng(k)
    data = rng.integers(0, 200, (5, 6)).astype(np.uint8)
    src = make_raster(data, pixel=1.0)

    right = resample(src, src.transform.shifted(k, 0), 6, 5, method="nearest")
    down = resample(src, src.transform.shifted(0, k), 6, 5, method="nearest")

    np.testing.assert_array_equal(right.band(0)[:, : 6 - k], data[:, k:])
    assert not right.valid_mask()[:, 6 - k:].any()
    np.testing.assert_array_equal(down.band(0)[: 5 - k], data[k:])
    assert not down.valid_mask()[5 - k:].any()


@pytest.mark.parametrize("scale, offset", [(4.0, 0.0), (2.5, -37.0), (0.01, 1000.0)])
def test_composite_invariant_under_affine_rescaling(satellite, scale, offset):
    rescaled = satellite.with_data(
        (satellite.data.astype(np.float64) * scale + offset).astype(np.float32), band_names=BandSet.ROLES
    )

    a = false_color_composite(satellite)
    b = false_color_composite(rescaled)

    assert np.abs(a.data.astype(np.int16) - b.data.astype(np.int16)).max() <= 1


def test_composite_constant_band_is_zero_channel():
    data = np.stack([np.arange(6, dtype=np.float32).reshape(2, 3)] * len(BandSet.ROLES))
    data[BandSet.ROLES.index("green")] = 42.0
    sat = make_raster(data, band_names=BandSet.ROLES)

    composite = false_color_composite(sat)

    np.testing.assert_array_equal(composite.band("green"), 0)
    assert composite.band("nir").max() == 255
    with pytest.raises(ParameterError):
        false_color_composite(sat, bounds={"green": (42.0, 42.0)})
