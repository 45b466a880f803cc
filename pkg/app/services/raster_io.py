"""
GRF raster container and PNG mask reader/writer

GRF = JSON sidecar (<name>.grf) + little-endian band-sequential binary (<name>.bin)
"""
import json
import logging
from pathlib import Path
from threading import RLock
from typing import Union

import numpy as np
from cachetools import LRUCache
from PIL import Image
from pydantic import ValidationError

from app.models.raster import DTYPES, GeoRaster, GeoTransform
from app.models.schemas import GrfHeader, PngSidecar
from app.utils.errors import DataValidationError, RasterFormatError, SchemaError
from app.utils.setting import get_config

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_raster_cache = LRUCache(maxsize=get_config().RASTER_CACHE_SIZE)
_raster_cache_lock = RLock()


def binary_path(path: PathLike) -> Path:
    """sidecar 경로 -> 바이너리 경로 (.grf -> .bin)"""
    return Path(path).with_suffix(".bin")


def png_sidecar_path(path: PathLike) -> Path:
    """mask.png -> mask.json"""
    return Path(path).with_suffix(".json")


def header_for(raster: GeoRaster) -> GrfHeader:
    transform = raster.require_transform()
    return GrfHeader(
        width=raster.width,
        height=raster.height,
        bands=raster.bands,
        dtype=raster.dtype,
        transform=transform.to_list(),
        crs=raster.crs,
        nodata=raster.nodata,
        band_names=list(raster.band_names),
    )


def dumps_json(payload) -> str:
    """모든 JSON 산출물의 공통 직렬화 (키 정렬, 2칸 들여쓰기, 끝 줄바꿈)"""
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_raster(raster: GeoRaster, path: PathLike) -> Path:
    """
    GRF로 저장합니다.

    Args:
        raster: 저장할 래스터
        path: sidecar 경로 (.grf)

    Returns:
        sidecar 경로
    """
    path = Path(path)
    if path.suffix != ".grf":
        path = path.with_suffix(".grf")
    path.parent.mkdir(parents=True, exist_ok=True)

    header = header_for(raster)
    path.write_text(dumps_json(header.model_dump()), encoding="utf-8")
    binary_path(path).write_bytes(raster.data.astype(DTYPES[raster.dtype], copy=False).tobytes(order="C"))

    logger.debug(f"Wrote {raster} to {path}")
    return path


def _cache_key(path: PathLike):
    path = Path(path).resolve()
    try:
        stat = path.stat()
    except FileNotFoundError:
        raise RasterFormatError(f"Raster not found: {path}") from None
    bin_path = binary_path(path) if path.suffix == ".grf" else path
    bin_stat = bin_path.stat() if bin_path.exists() else stat
    return (str(path), stat.st_mtime_ns, stat.st_size, bin_stat.st_mtime_ns, bin_stat.st_size)


def read_raster(path: PathLike) -> GeoRaster:
    """
    GRF 또는 PNG 마스크를 읽습니다. 같은 파일의 반복 읽기는 LRU 캐시에서 반환됩니다.
    (GeoRaster는 읽기 전용이므로 공유해도 안전)
    """
    key = _cache_key(path)
    with _raster_cache_lock:
        if key in _raster_cache:
            return _raster_cache[key]

    path = Path(path)
    if path.suffix.lower() == ".png":
        raster = read_png_mask(path)
    else:
        raster = _read_grf(path)

    with _raster_cache_lock:
        _raster_cache[key] = raster
    return raster


def clear_raster_cache() -> None:
    with _raster_cache_lock:
        _raster_cache.clear()


def _read_grf(path: Path) -> GeoRaster:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"Invalid GRF sidecar {path}: {e}") from None

    try:
        header = GrfHeader.model_validate(payload)
    except ValidationError as e:
        raise SchemaError(f"Invalid GRF sidecar {path}: {e}") from None

    bin_path = binary_path(path)
    if not bin_path.exists():
        raise RasterFormatError(f"Missing GRF binary: {bin_path}")

    dtype = DTYPES[header.dtype]
    raw = bin_path.read_bytes()
    expected = header.width * header.height * header.bands * dtype.itemsize
    if len(raw) != expected:
        raise RasterFormatError(
            f"GRF binary {bin_path} has {len(raw)} bytes, expected {expected}"
        )

    data = np.frombuffer(raw, dtype=dtype).reshape(header.bands, header.height, header.width)
    return GeoRaster(
        data=data,
        transform=GeoTransform.from_list(header.transform),
        crs=header.crs,
        nodata=header.nodata,
        band_names=tuple(header.band_names),
    )


def read_png_mask(path: PathLike) -> GeoRaster:
    """
    8-bit PNG 마스크 (0 = crop, 255 = weed)를 {0, 1} u8 래스터로 읽습니다.
    같은 이름의 .json sidecar가 없으면 transform은 None.
    """
    path = Path(path)
    with Image.open(path) as image:
        if image.mode not in ("L", "1", "P"):
            raise DataValidationError(f"PNG mask must be single-band 8-bit, got mode {image.mode}")
        data = np.array(image.convert("L"), dtype=np.uint8)

    values = np.unique(data)
    if not set(values.tolist()) <= {0, 255}:
        raise DataValidationError(f"PNG mask {path} has values other than 0/255: {values[:10].tolist()}")
    data = (data == 255).astype(np.uint8)

    transform = None
    crs = ""
    sidecar = png_sidecar_path(path)
    if sidecar.exists():
        try:
            meta = PngSidecar.model_validate_json(sidecar.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise SchemaError(f"Invalid PNG sidecar {sidecar}: {e}") from None
        transform = GeoTransform.from_list(meta.transform)
        crs = meta.crs

    return GeoRaster(data=data, transform=transform, crs=crs)


def write_png_mask(raster: GeoRaster, path: PathLike) -> Path:
    """{0, 1} 단일 밴드 마스크를 0/255 PNG + JSON sidecar로 저장"""
    if raster.bands != 1 or raster.dtype != "u8":
        raise DataValidationError("PNG masks must be single-band u8")
    band = raster.band(0)
    if not np.isin(band, (0, 1)).all():
        raise DataValidationError("PNG masks must hold only 0/1 values")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((band * 255).astype(np.uint8)).save(path, format="PNG")

    if raster.transform is not None:
        meta = PngSidecar(transform=raster.transform.to_list(), crs=raster.crs)
        png_sidecar_path(path).write_text(dumps_json(meta.model_dump()), encoding="utf-8")
    return path


def write_rgb_png(raster: GeoRaster, path: PathLike) -> Path:
    """3밴드 u8 래스터 (composite)를 RGB PNG로 저장"""
    if raster.bands != 3 or raster.dtype != "u8":
        raise DataValidationError("RGB PNG export needs a 3-band u8 raster")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(np.moveaxis(raster.data, 0, -1))).save(path, format="PNG")
    return path


def write_json(payload, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(payload), encoding="utf-8")
    return path


def read_json(path: PathLike):
    path = Path(path)
    if not path.exists():
        raise RasterFormatError(f"File not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"Invalid JSON in {path}: {e}") from None
