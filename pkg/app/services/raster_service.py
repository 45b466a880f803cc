"""
Raster resampling, grid alignment and band math
"""
import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from app.models.raster import DEFAULT_NODATA, BandSet, GeoRaster, GeoTransform
from app.utils.errors import AlignmentError, CoverageError, ParameterError
from app.utils.parallel import map_chunks
from app.utils.setting import get_config

logger = logging.getLogger(__name__)

RESAMPLING_METHODS = ("nearest", "bilinear", "block-average")

# 한 번에 처리할 출력 행 수
ROW_CHUNK = 256

# 정수 배율/원점 정렬 판정 허용 오차 (픽셀 단위)
GRID_TOLERANCE = 1e-6


def _output_nodata(src: GeoRaster, dtype: str, data: np.ndarray, missing: np.ndarray) -> Optional[float]:
    """
    결측 픽셀이 있을 때만 nodata 를 둡니다.

    원본 nodata 가 있으면 그대로, 없으면 유효 출력 값과 겹치지 않는 값 (u8 은 255 부터 아래로 탐색).

    Raises:
        ParameterError: 겹치지 않는 nodata 값이 없음
    """
    if src.nodata is not None:
        return src.nodata
    if not missing.any():
        return None

    used = np.unique(data[:, ~missing])
    if dtype == "u8":
        free = np.setdiff1d(np.arange(256), used)
        if free.size == 0:
            raise ParameterError("Every u8 value occurs in the data; no nodata value left for pixels outside the source")
        return int(free[-1])
    if np.isin(np.float32(DEFAULT_NODATA[dtype]), used):
        raise ParameterError(f"Data contains the default nodata value {DEFAULT_NODATA[dtype]}; set an explicit nodata")
    return DEFAULT_NODATA[dtype]


def _check_crs(src: GeoRaster, crs: Optional[str]) -> None:
    if crs is not None and src.crs != crs:
        raise AlignmentError(f"CRS mismatch: source {src.crs!r} vs target {crs!r}")


def _integer_ratio(value: float, name: str) -> int:
    ratio = int(round(value))
    if ratio < 1 or abs(value - ratio) > GRID_TOLERANCE:
        raise ParameterError(f"block-average requires an integer downscale ratio, {name} ratio is {value}")
    return ratio


def resample(
    src: GeoRaster,
    transform: GeoTransform,
    width: int,
    height: int,
    method: str = "nearest",
    crs: Optional[str] = None,
    threads: Optional[int] = None,
) -> GeoRaster:
    """
    src를 대상 그리드로 리샘플링합니다.

    Args:
        src: 원본 래스터
        transform: 대상 그리드 geotransform
        width: 대상 폭 (픽셀)
        height: 대상 높이 (픽셀)
        method: nearest | bilinear | block-average
        crs: 대상 CRS (None이면 src와 같다고 간주)
        threads: 행 블록 병렬 처리 스레드 수

    Returns:
        대상 그리드 위의 래스터. 원본 범위 밖 픽셀은 nodata.
    """
    if method not in RESAMPLING_METHODS:
        raise ParameterError(f"Unknown resampling method '{method}', expected one of {RESAMPLING_METHODS}")
    if width < 1 or height < 1:
        raise ParameterError(f"Target dimensions must be positive, got {width}x{height}")
    _check_crs(src, crs)
    src_transform = src.require_transform()

    if method == "nearest":
        out_dtype = src.dtype
        rows_func = _nearest_rows(src, src_transform, transform, width)
    elif method == "bilinear":
        out_dtype = "f32"
        rows_func = _bilinear_rows(src, src_transform, transform, width)
    else:
        out_dtype = "f32"
        rows_func = _block_average_rows(src, src_transform, transform, width)

    # 각 청크: (출력 값, 원본 밖이거나 nodata 가 전파된 픽셀 마스크)
    chunks = map_chunks(rows_func, height, ROW_CHUNK, threads)
    data = np.concatenate([values for values, _ in chunks], axis=1)
    missing = np.concatenate([mask for _, mask in chunks], axis=0)

    nodata = _output_nodata(src, out_dtype, data, missing)
    if missing.any():
        data[:, missing] = nodata
    logger.debug(
        f"Resampled {src.width}x{src.height} -> {width}x{height} ({method}), "
        f"{int(missing.sum())} missing pixels, nodata={nodata}"
    )
    return GeoRaster(
        data=data,
        transform=transform,
        crs=src.crs if crs is None else crs,
        nodata=nodata,
        band_names=src.band_names,
    )


def _source_index(src_transform: GeoTransform, transform: GeoTransform, width: int, start: int, stop: int):
    """대상 픽셀 중심이 떨어지는 원본 픽셀의 실수 좌표 (col_f: (width,), row_f: (rows,))"""
    x, _ = transform.pixel_to_ground(np.arange(width), 0)
    _, y = transform.pixel_to_ground(0, np.arange(start, stop))
    col_f, _ = src_transform.ground_to_pixel(x, src_transform.origin_y)
    _, row_f = src_transform.ground_to_pixel(src_transform.origin_x, y)
    return col_f, row_f


def _nearest_rows(src, src_transform, transform, width):
    def run(start: int, stop: int) -> Tuple[np.ndarray, np.ndarray]:
        col_f, row_f = _source_index(src_transform, transform, width, start, stop)
        cols = np.floor(col_f + 0.5).astype(np.int64)
        rows = np.floor(row_f + 0.5).astype(np.int64)
        col_ok = (cols >= 0) & (cols < src.width)
        row_ok = (rows >= 0) & (rows < src.height)

        out = src.data[:, np.clip(rows, 0, src.height - 1)][:, :, np.clip(cols, 0, src.width - 1)]
        out = np.array(out, copy=True)
        outside = ~(row_ok[:, None] & col_ok[None, :])
        return out, outside

    return run


def _bilinear_rows(src, src_transform, transform, width):
    data = src.data.astype(np.float64)
    invalid = ~src.valid_mask()

    def run(start: int, stop: int) -> Tuple[np.ndarray, np.ndarray]:
        col_f, row_f = _source_index(src_transform, transform, width, start, stop)
        # 원본 범위: 가장자리 픽셀의 바깥 모서리까지 (중심 좌표 -0.5 ~ n-0.5)
        col_ok = (col_f >= -0.5) & (col_f <= src.width - 0.5)
        row_ok = (row_f >= -0.5) & (row_f <= src.height - 0.5)

        cf = np.clip(col_f, 0, src.width - 1)
        rf = np.clip(row_f, 0, src.height - 1)
        c0 = np.floor(cf).astype(np.int64)
        r0 = np.floor(rf).astype(np.int64)
        c1 = np.minimum(c0 + 1, src.width - 1)
        r1 = np.minimum(r0 + 1, src.height - 1)
        wc = (cf - c0)[None, None, :]
        wr = (rf - r0)[None, :, None]

        top = data[:, r0][:, :, c0] * (1 - wc) + data[:, r0][:, :, c1] * wc
        bottom = data[:, r1][:, :, c0] * (1 - wc) + data[:, r1][:, :, c1] * wc
        out = (top * (1 - wr) + bottom * wr).astype(np.float32)

        # 보간에 참여하는 4개 픽셀 중 하나라도 nodata면 nodata
        bad = invalid[r0][:, c0] | invalid[r0][:, c1] | invalid[r1][:, c0] | invalid[r1][:, c1]
        bad |= ~(row_ok[:, None] & col_ok[None, :])
        return out, bad

    return run


def _block_average_rows(src, src_transform, transform, width):
    kx = _integer_ratio(transform.pixel_w / src_transform.pixel_w, "x")
    ky = _integer_ratio(transform.pixel_h / src_transform.pixel_h, "y")

    off_x = (transform.origin_x - src_transform.origin_x) / src_transform.pixel_w
    off_y = (src_transform.origin_y - transform.origin_y) / src_transform.pixel_h
    ox, oy = int(round(off_x)), int(round(off_y))
    if abs(off_x - ox) > GRID_TOLERANCE or abs(off_y - oy) > GRID_TOLERANCE:
        raise ParameterError("block-average requires the target grid to be aligned with source pixel edges")

    data = src.data.astype(np.float64)
    invalid = ~src.valid_mask()

    def run(start: int, stop: int) -> Tuple[np.ndarray, np.ndarray]:
        rows = stop - start
        out = np.zeros((src.bands, rows, width), dtype=np.float32)
        missing = np.ones((rows, width), dtype=bool)

        # 원본 범위 안에 완전히 들어오는 블록만 계산
        r_lo = max(start, -(-(-oy) // ky))
        r_hi = min(stop, (src.height - oy) // ky)
        c_lo = max(0, -(-(-ox) // kx))
        c_hi = min(width, (src.width - ox) // kx)
        if r_lo >= r_hi or c_lo >= c_hi:
            return out, missing

        sr0, sr1 = oy + r_lo * ky, oy + r_hi * ky
        sc0, sc1 = ox + c_lo * kx, ox + c_hi * kx
        nr, nc = r_hi - r_lo, c_hi - c_lo

        blocks = data[:, sr0:sr1, sc0:sc1].reshape(src.bands, nr, ky, nc, kx)
        means = blocks.mean(axis=(2, 4))
        bad = invalid[sr0:sr1, sc0:sc1].reshape(nr, ky, nc, kx).any(axis=(1, 3))

        out[:, r_lo - start:r_hi - start, c_lo:c_hi] = means.astype(np.float32)
        missing[r_lo - start:r_hi - start, c_lo:c_hi] = bad
        return out, missing

    return run


def uncovered_fraction(src: GeoRaster, ref: GeoRaster) -> float:
    """ref 범위 중 src 범위 밖에 있는 면적 비율"""
    sx0, sy0, sx1, sy1 = src.require_transform().extent(src.width, src.height)
    rx0, ry0, rx1, ry1 = ref.require_transform().extent(ref.width, ref.height)
    ix = max(0.0, min(sx1, rx1) - max(sx0, rx0))
    iy = max(0.0, min(sy1, ry1) - max(sy0, ry0))
    ref_area = (rx1 - rx0) * (ry1 - ry0)
    return float(1.0 - (ix * iy) / ref_area)


def align(src: GeoRaster, ref: GeoRaster, method: str = "nearest", threads: Optional[int] = None) -> GeoRaster:
    """
    src를 ref 그리드 (transform, 크기)로 정확히 맞춥니다.

    src 범위가 ref 범위를 (원본 픽셀 하나 허용 오차 안에서) 덮지 못하면 CoverageError.
    """
    if src.crs != ref.crs:
        raise AlignmentError(f"CRS mismatch: source {src.crs!r} vs reference {ref.crs!r}")
    src_t = src.require_transform()
    ref_t = ref.require_transform()

    sx0, sy0, sx1, sy1 = src_t.extent(src.width, src.height)
    rx0, ry0, rx1, ry1 = ref_t.extent(ref.width, ref.height)
    tol_x, tol_y = src_t.pixel_w, src_t.pixel_h
    if rx0 < sx0 - tol_x or rx1 > sx1 + tol_x or ry0 < sy0 - tol_y or ry1 > sy1 + tol_y:
        fraction = uncovered_fraction(src, ref)
        logger.warning(f"Alignment rejected, {fraction:.2%} of the reference grid uncovered")
        raise CoverageError(fraction)

    if src_t == ref_t and src.shape == ref.shape:
        return src

    return resample(src, ref_t, ref.width, ref.height, method=method, crs=ref.crs, threads=threads)


def percentile_bounds(band: np.ndarray, valid: np.ndarray, percentiles: Tuple[float, float]) -> Tuple[float, float]:
    values = band[valid]
    if values.size == 0:
        raise ParameterError("Band has no valid pixels for percentile stretch")
    lo, hi = np.percentile(values.astype(np.float64), percentiles)
    return float(lo), float(hi)


def stretch_to_u8(band: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """
    [lo, hi] 선형 스트레치 -> 0..255.
    반올림 규칙: floor(v + 0.5) (중간값 127.5 -> 128)
    """
    if not lo < hi:
        raise ParameterError(f"Stretch bounds must satisfy lo < hi, got ({lo}, {hi})")
    scaled = (band.astype(np.float64) - lo) / (hi - lo) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def false_color_composite(
    sat: GeoRaster,
    bands: Optional[BandSet] = None,
    mapping: Optional[Sequence[str]] = None,
    bounds: Optional[Dict[str, Tuple[float, float]]] = None,
    percentiles: Optional[Tuple[float, float]] = None,
) -> GeoRaster:
    """
    밴드 역할 3개를 R, G, B 채널로 매핑한 3밴드 u8 composite.

    Args:
        sat: 위성 래스터
        bands: 밴드 역할 매핑 (None이면 band_names 또는 기본 순서)
        mapping: (R, G, B) 역할. 기본값 nir, green, vre2
        bounds: 역할별 스트레치 범위 (lo, hi). 없으면 백분위수 (상수 밴드는 0 채널)
        percentiles: 기본 백분위수 (2, 98)

    Returns:
        composite 래스터. nodata 픽셀은 0.
    """
    config = get_config()
    if bands is None:
        bands = BandSet.from_band_names(sat.band_names) if sat.band_names else BandSet()
    mapping = tuple(mapping or config.COMPOSITE_MAPPING)
    percentiles = tuple(percentiles or config.STRETCH_PERCENTILES)
    bounds = bounds or {}

    if len(mapping) != 3:
        raise ParameterError(f"Composite mapping needs 3 roles, got {mapping}")

    valid = sat.valid_mask()
    channels = []
    for role in mapping:
        if role not in bands:
            raise ParameterError(f"Band role '{role}' missing from band set")
        index = bands[role]
        if index >= sat.bands:
            raise ParameterError(f"Band role '{role}' maps to index {index}, raster has {sat.bands} bands")
        band = sat.band(index)

        if role in bounds:
            lo, hi = bounds[role]
        else:
            lo, hi = percentile_bounds(band, valid, percentiles)
        if role not in bounds and lo >= hi:
            # 상수 밴드: 백분위 스트레치가 정의되지 않아 0 채널
            logger.warning(f"Composite channel {role} is constant ({lo:.6g}); writing an all-zero channel")
            channel = np.zeros(band.shape, dtype=np.uint8)
        else:
            channel = stretch_to_u8(band, lo, hi)
        channel[~valid] = 0
        channels.append(channel)
        logger.debug(f"Composite channel {role}: stretch [{lo:.6g}, {hi:.6g}]")

    return GeoRaster(
        data=np.stack(channels),
        transform=sat.transform,
        crs=sat.crs,
        band_names=tuple(mapping),
    )
