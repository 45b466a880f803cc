import os

# get_config() 가 처음 호출되기 전에 테스트 환경으로 고정
os.environ["ENVIRONMENT"] = "TEST"

import numpy as np
import pytest

from app.models.raster import BandSet, GeoRaster, GeoTransform
from app.models.schemas import FieldSpec
from app.services.raster_io import clear_raster_cache


@pytest.fixture(autouse=True)
def _fresh_raster_cache():
    clear_raster_cache()
    yield
    clear_raster_cache()


def make_raster(data, pixel: float = 10.0, origin=(500000.0, 4100000.0), nodata=None, band_names=(), crs="EPSG:32611"):
    """테스트용 래스터 (정수 배열은 u8, 실수 배열은 f32)"""
    data = np.asarray(data)
    dtype = np.uint8 if np.issubdtype(data.dtype, np.integer) or data.dtype == bool else np.float32
    return GeoRaster(
        data=data.astype(dtype),
        transform=GeoTransform(origin[0], origin[1], pixel, pixel),
        crs=crs,
        nodata=nodata,
        band_names=tuple(band_names),
    )


@pytest.fixture
def raster_factory():
    return make_raster


@pytest.fixture
def satellite():
    """4x5 픽셀 10밴드 위성 래스터, 밴드 i 의 값은 i*100 + 픽셀 번호"""
    pixels = np.arange(20, dtype=np.float32).reshape(4, 5)
    data = np.stack([pixels + 100 * i for i in range(len(BandSet.ROLES))])
    return make_raster(data, band_names=BandSet.ROLES)


@pytest.fixture
def small_spec():
    """400x400 드론 픽셀 (0.5m) / 20x20 위성 픽셀 (10m)"""
    return FieldSpec(
        extent_m=(200.0, 200.0),
        drone_pixel=0.5,
        sat_pixel=10.0,
        weed_patch_count=30,
        patch_radius_mean=8.0,
        patch_radius_std=2.0,
        target_weed_fraction=10.0,
        seed=3,
    )
