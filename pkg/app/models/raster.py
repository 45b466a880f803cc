"""
Raster data model: GeoTransform, GeoRaster, BandSet
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.utils.errors import DataValidationError, ParameterError

# GRF dtype 이름 -> numpy dtype (리틀 엔디언 고정)
DTYPES: Dict[str, np.dtype] = {
    "u8": np.dtype("<u1"),
    "f32": np.dtype("<f4"),
}

# nodata 미지정 래스터에서 범위 밖 픽셀에 사용할 기본값
DEFAULT_NODATA: Dict[str, float] = {
    "u8": 255,
    "f32": -9999.0,
}

SQUARE_METERS_PER_ACRE = 4046.8564224


def dtype_name(dtype: np.dtype) -> str:
    """numpy dtype -> GRF dtype 이름"""
    dtype = np.dtype(dtype)
    if dtype == np.uint8:
        return "u8"
    if dtype == np.float32:
        return "f32"
    raise ParameterError(f"Unsupported raster dtype: {dtype}")


@dataclass(frozen=True)
class GeoTransform:
    """
    축 정렬(회전 없음) affine geotransform.

    origin_x, origin_y는 그리드 좌상단 모서리의 지상 좌표이며
    행 방향은 남쪽(y 감소)을 향한다. 좌표 변환은 픽셀 중심 기준.
    """

    origin_x: float
    origin_y: float
    pixel_w: float
    pixel_h: float

    def __post_init__(self):
        if not (self.pixel_w > 0 and self.pixel_h > 0):
            raise ParameterError(
                f"Pixel sizes must be positive, got ({self.pixel_w}, {self.pixel_h})"
            )
        for name in ("origin_x", "origin_y", "pixel_w", "pixel_h"):
            if not math.isfinite(getattr(self, name)):
                raise ParameterError(f"GeoTransform.{name} must be finite")

    @property
    def pixel_area(self) -> float:
        return self.pixel_w * self.pixel_h

    def pixel_to_ground(self, col, row):
        """픽셀 (col, row) 중심 -> 지상 좌표 (x, y)"""
        x = self.origin_x + (np.asarray(col, dtype=np.float64) + 0.5) * self.pixel_w
        y = self.origin_y - (np.asarray(row, dtype=np.float64) + 0.5) * self.pixel_h
        return x, y

    def ground_to_pixel(self, x, y):
        """지상 좌표 (x, y) -> 실수 픽셀 좌표 (col, row). 정수값이 픽셀 중심"""
        col = (np.asarray(x, dtype=np.float64) - self.origin_x) / self.pixel_w - 0.5
        row = (self.origin_y - np.asarray(y, dtype=np.float64)) / self.pixel_h - 0.5
        return col, row

    def extent(self, width: int, height: int) -> Tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)"""
        return (
            self.origin_x,
            self.origin_y - height * self.pixel_h,
            self.origin_x + width * self.pixel_w,
            self.origin_y,
        )

    def scaled(self, factor: float) -> "GeoTransform":
        """같은 원점, factor 배 큰 픽셀"""
        return GeoTransform(self.origin_x, self.origin_y, self.pixel_w * factor, self.pixel_h * factor)

    def shifted(self, cols: float, rows: float) -> "GeoTransform":
        """원점을 (cols, rows) 픽셀만큼 이동"""
        return GeoTransform(
            self.origin_x + cols * self.pixel_w,
            self.origin_y - rows * self.pixel_h,
            self.pixel_w,
            self.pixel_h,
        )

    def to_list(self) -> List[float]:
        """GRF sidecar 순서: [origin_x, pixel_w, 0, origin_y, 0, -pixel_h]"""
        return [self.origin_x, self.pixel_w, 0.0, self.origin_y, 0.0, -self.pixel_h]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "GeoTransform":
        if len(values) != 6:
            raise DataValidationError(f"Transform must have 6 terms, got {len(values)}")
        origin_x, pixel_w, rot_x, origin_y, rot_y, neg_pixel_h = (float(v) for v in values)
        if rot_x != 0.0 or rot_y != 0.0:
            raise DataValidationError("Rotated geotransforms are not supported")
        return cls(origin_x, origin_y, pixel_w, -neg_pixel_h)


class BandSet:
    """
    Sentinel-2 밴드 역할 -> 밴드 인덱스 매핑.
    10m 네이티브 4개 + 20m 네이티브(10m로 리샘플) 6개.
    """

    ROLES: Tuple[str, ...] = (
        "blue", "green", "red", "nir",
        "vre1", "vre2", "vre3", "nnir", "swir1", "swir2",
    )
    # FeatureTable CSV 헤더 이름
    COLUMNS: Tuple[str, ...] = (
        "b", "g", "r", "nir",
        "vre1", "vre2", "vre3", "nnir", "swir1", "swir2",
    )
    NATIVE_10M: Tuple[str, ...] = ("blue", "green", "red", "nir")

    def __init__(self, indices: Optional[Dict[str, int]] = None):
        if indices is None:
            indices = {role: i for i, role in enumerate(self.ROLES)}

        missing = [role for role in self.ROLES if role not in indices]
        unknown = [role for role in indices if role not in self.ROLES]
        if missing or unknown:
            raise ParameterError(f"BandSet roles mismatch (missing={missing}, unknown={unknown})")

        values = [int(indices[role]) for role in self.ROLES]
        if len(set(values)) != len(values):
            raise ParameterError("BandSet requires 10 distinct band indices")
        if min(values) < 0:
            raise ParameterError("Band indices must be non-negative")

        self._indices = {role: int(indices[role]) for role in self.ROLES}

    def __getitem__(self, role: str) -> int:
        try:
            return self._indices[role]
        except KeyError:
            raise ParameterError(f"Unknown band role: {role}") from None

    def __contains__(self, role: str) -> bool:
        return role in self._indices

    def ordered_indices(self) -> List[int]:
        """피처 벡터 순서 (ROLES 순서)의 밴드 인덱스"""
        return [self._indices[role] for role in self.ROLES]

    def to_dict(self) -> Dict[str, int]:
        return dict(self._indices)

    @classmethod
    def from_band_names(cls, names: Sequence[str]) -> "BandSet":
        """GRF band_names 로부터 역할을 찾는다 (역할 이름 또는 CSV 컬럼 이름 허용)"""
        lookup = {}
        for i, name in enumerate(names):
            key = str(name).lower()
            if key in cls.COLUMNS:
                key = cls.ROLES[cls.COLUMNS.index(key)]
            lookup[key] = i
        return cls({role: lookup[role] for role in cls.ROLES if role in lookup})

    def __eq__(self, other) -> bool:
        return isinstance(other, BandSet) and self._indices == other._indices

    def __repr__(self) -> str:
        return f"BandSet({self._indices})"


@dataclass(frozen=True)
class GeoRaster:
    """
    N 밴드 그리드 래스터. data는 (bands, height, width) 배열이며 생성 후 읽기 전용.
    """

    data: np.ndarray
    transform: Optional[GeoTransform]
    crs: str = ""
    nodata: Optional[float] = None
    band_names: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[np.newaxis, :, :]
        if data.ndim != 3:
            raise DataValidationError(f"Raster data must be 2-D or 3-D, got shape {data.shape}")
        if data.shape[0] < 1:
            raise DataValidationError("Raster needs at least one band")

        name = dtype_name(data.dtype)
        data = np.array(data, dtype=DTYPES[name], order="C", copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

        if self.nodata is not None:
            nodata = float(self.nodata)
            if not math.isfinite(nodata):
                raise DataValidationError("nodata must be a finite value")
            if name == "u8" and not (0 <= nodata <= 255 and nodata == int(nodata)):
                raise DataValidationError(f"nodata {nodata} not representable as u8")
            object.__setattr__(self, "nodata", int(nodata) if name == "u8" else nodata)

        if name == "f32":
            finite = np.isfinite(data)
            if not finite.all():
                raise DataValidationError("Raster contains non-finite values")

        names = tuple(str(n) for n in self.band_names)
        if names and len(names) != data.shape[0]:
            raise DataValidationError(
                f"band_names has {len(names)} entries for {data.shape[0]} bands"
            )
        object.__setattr__(self, "band_names", names)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def dtype(self) -> str:
        return dtype_name(self.data.dtype)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def band(self, key: Union[int, str] = 0) -> np.ndarray:
        """밴드 인덱스 또는 band_names 이름으로 2-D 배열 반환"""
        if isinstance(key, str):
            if key not in self.band_names:
                raise ParameterError(f"Band '{key}' not found in {list(self.band_names)}")
            key = self.band_names.index(key)
        if not 0 <= key < self.bands:
            raise ParameterError(f"Band index {key} out of range (bands={self.bands})")
        return self.data[key]

    def valid_mask(self) -> np.ndarray:
        """모든 밴드가 nodata가 아닌 픽셀 (height, width)"""
        if self.nodata is None:
            return np.ones(self.shape, dtype=bool)
        return ~(self.data == self.nodata).any(axis=0)

    def with_data(self, data: np.ndarray, nodata=..., band_names=None) -> "GeoRaster":
        """같은 그리드/CRS에 새 데이터"""
        return GeoRaster(
            data=data,
            transform=self.transform,
            crs=self.crs,
            nodata=self.nodata if nodata is ... else nodata,
            band_names=tuple(band_names) if band_names is not None else (),
        )

    def require_transform(self) -> GeoTransform:
        if self.transform is None:
            raise ParameterError("Raster has no geotransform (unknown pixel size)")
        return self.transform

    def same_grid(self, other: "GeoRaster") -> bool:
        return (
            self.transform == other.transform
            and self.shape == other.shape
            and self.crs == other.crs
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, GeoRaster):
            return NotImplemented
        return (
            self.same_grid(other)
            and self.nodata == other.nodata
            and self.band_names == other.band_names
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return (
            f"GeoRaster({self.bands}x{self.height}x{self.width} {self.dtype}, "
            f"crs={self.crs!r}, nodata={self.nodata})"
        )


def acres(square_meters: float) -> float:
    return float(square_meters) / SQUARE_METERS_PER_ACRE
