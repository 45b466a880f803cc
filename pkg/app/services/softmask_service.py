"""
Soft weed-fraction masks, area accounting and spatial split assignment
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.models.raster import GeoRaster, acres
from app.utils.errors import DataValidationError, ParameterError
from app.utils.setting import resolve_seed

logger = logging.getLogger(__name__)

# split 라벨 값
TRAIN, HELDOUT, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "heldout": HELDOUT, "test": TEST}
SPLIT_NODATA = 255


@dataclass(frozen=True)
class AreaReport:
    total_land_acres: float
    weed_acres: float
    weed_pct: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def normalize_binary(mask: GeoRaster) -> np.ndarray:
    """
    이진 마스크를 {0, 1} 배열로 정규화합니다. {0, 255} (PNG 규약)도 허용.
    nodata 픽셀은 그대로 두지 않고 호출자가 valid_mask로 처리해야 합니다.

    Returns:
        (height, width) uint8 배열
    """
    if mask.bands != 1:
        raise DataValidationError(f"Mask must be single-band, got {mask.bands} bands")
    band = mask.band(0)
    valid = mask.valid_mask()
    values = set(np.unique(band[valid]).tolist())

    if values <= {0, 1}:
        return np.where(valid, band, 0).astype(np.uint8)
    if values <= {0, 255}:
        return np.where(valid, band == 255, 0).astype(np.uint8)
    raise DataValidationError(f"Mask is not binary, found values {sorted(values)[:10]}")


def is_fraction_mask(raster: GeoRaster) -> bool:
    return raster.dtype == "f32"


def _fraction_values(raster: GeoRaster) -> np.ndarray:
    """f32 fraction 래스터의 값 검증 후 float64 배열 반환 (nodata 위치는 0)"""
    if raster.bands != 1:
        raise DataValidationError(f"Fraction mask must be single-band, got {raster.bands} bands")
    band = raster.band(0).astype(np.float64)
    valid = raster.valid_mask()
    values = band[valid]
    if values.size and (values.min() < 0 or values.max() > 1):
        raise DataValidationError(
            f"Fraction values must lie in [0, 1], found [{values.min()}, {values.max()}]"
        )
    return np.where(valid, band, 0.0)


def weed_values(raster: GeoRaster) -> np.ndarray:
    """이진 마스크 또는 fraction 마스크 -> 픽셀별 weed 비율 (float64, nodata는 0)"""
    if is_fraction_mask(raster):
        return _fraction_values(raster)
    return normalize_binary(raster).astype(np.float64)


def block_fraction(mask: GeoRaster, factor: int) -> GeoRaster:
    """
    factor x factor 블록마다 weed 비율을 계산합니다.

    u8 입력은 이진 마스크 ({0,1} 또는 {0,255}), f32 입력은 fraction 마스크 (블록 평균)로 처리.
    nodata가 포함된 블록은 nodata.

    Args:
        mask: 드론 해상도 마스크
        factor: 블록 크기 (드론 5cm -> 위성 10m 는 200)

    Returns:
        f32 FractionMask, transform은 factor 배 확대
    """
    factor = int(factor)
    if factor < 1:
        raise ParameterError(f"factor must be >= 1, got {factor}")
    if mask.height % factor or mask.width % factor:
        raise ParameterError(
            f"Mask dims {mask.width}x{mask.height} are not divisible by factor {factor}; crop or pad explicitly"
        )
    transform = mask.require_transform()

    valid = mask.valid_mask()
    h, w = mask.height // factor, mask.width // factor

    if is_fraction_mask(mask):
        values = _fraction_values(mask)
        sums = values.reshape(h, factor, w, factor).sum(axis=(1, 3))
    else:
        counts = normalize_binary(mask).astype(np.int64)
        sums = counts.reshape(h, factor, w, factor).sum(axis=(1, 3)).astype(np.float64)

    fractions = (sums / float(factor * factor)).astype(np.float32)
    bad = ~valid.reshape(h, factor, w, factor).all(axis=(1, 3))

    nodata = None
    if bad.any():
        nodata = -9999.0
        fractions[bad] = nodata

    return GeoRaster(
        data=fractions,
        transform=transform.scaled(factor),
        crs=mask.crs,
        nodata=nodata,
        band_names=("weed_fraction",),
    )


def area_report(mask: GeoRaster, labels: Optional[np.ndarray] = None, split: Optional[str] = None) -> AreaReport:
    """
    전체 면적 / weed 면적 (acre) 을 계산합니다.
    이진 마스크: weed 픽셀 수 x 픽셀 면적, fraction 마스크: 합(fraction) x 픽셀 면적.

    Args:
        mask: 이진 또는 fraction 마스크
        labels: split 라벨 배열 (선택)
        split: labels와 함께 주어지면 해당 split 픽셀만 집계
    """
    transform = mask.require_transform()
    valid = mask.valid_mask()
    values = weed_values(mask)

    if split is not None:
        if labels is None:
            raise ParameterError("split restriction requires a labels array")
        valid = valid & (np.asarray(labels) == SPLIT_NAMES[split])

    pixel_area = transform.pixel_area
    total = acres(valid.sum() * pixel_area)
    weed = acres(values[valid].sum() * pixel_area)
    pct = (weed / total * 100.0) if total > 0 else 0.0
    return AreaReport(total_land_acres=total, weed_acres=weed, weed_pct=pct)


def compare_areas(pred: GeoRaster, truth: GeoRaster) -> Dict[str, float]:
    """
    실제 weed 면적과 예측 fraction 합으로 추정한 면적 비교.
    pred의 값은 [0, 1]로 잘라서 합산.
    """
    if not pred.same_grid(truth):
        raise ParameterError("compare_areas requires prediction and truth on the same grid")
    valid = pred.valid_mask() & truth.valid_mask()
    pixel_area = truth.require_transform().pixel_area
    predicted = np.clip(pred.band(0).astype(np.float64), 0.0, 1.0)
    actual = weed_values(truth)
    return {
        "weed_acres": acres(actual[valid].sum() * pixel_area),
        "predicted_weed_acres": acres(predicted[valid].sum() * pixel_area),
        "total_land_acres": acres(valid.sum() * pixel_area),
    }


def rank_fields(reports: Dict[str, AreaReport]) -> List[Tuple[str, AreaReport]]:
    """필드를 추정 weed 면적 내림차순으로 정렬 (동률은 이름순)"""
    return sorted(reports.items(), key=lambda item: (-item[1].weed_acres, item[0]))


def _largest_remainder(total: int, fractions: Sequence[float]) -> List[int]:
    raw = [total * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainder = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def split_assign(
    height: int,
    width: int,
    fractions: Sequence[float] = (0.45, 0.25, 0.30),
    block: int = 1,
    seed: Optional[int] = None,
) -> np.ndarray:
    """
    연속된 공간 블록 단위로 train / held-out / test 라벨을 할당합니다.

    Args:
        height, width: 그리드 크기
        fractions: (train, heldout, test) 비율, 합 1
        block: 블록 한 변 (픽셀). 가장자리의 자투리 블록도 하나의 블록
        seed: 셔플 seed

    Returns:
        (height, width) uint8 라벨 (0=train, 1=heldout, 2=test)
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3:
        raise ParameterError("fractions must be (train, heldout, test)")
    if min(fractions) < 0 or max(fractions) <= 0:
        raise ParameterError(f"fractions must be non-negative with one positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise ParameterError(f"fractions must sum to 1, got {sum(fractions)}")
    block = int(block)
    if block < 1 or block > height or block > width:
        raise ParameterError(f"block size {block} does not fit a {width}x{height} grid")

    by = -(-height // block)
    bx = -(-width // block)
    n_blocks = by * bx

    rng = np.random.default_rng(resolve_seed(seed))
    order = rng.permutation(n_blocks)
    counts = _largest_remainder(n_blocks, fractions)

    block_labels = np.empty(n_blocks, dtype=np.uint8)
    start = 0
    for label, count in enumerate(counts):
        block_labels[order[start:start + count]] = label
        start += count

    grid = block_labels.reshape(by, bx)
    labels = np.repeat(np.repeat(grid, block, axis=0), block, axis=1)[:height, :width]

    logger.info(
        f"Assigned {n_blocks} blocks of {block}px: train={counts[0]}, heldout={counts[1]}, test={counts[2]}"
    )
    return np.ascontiguousarray(labels)


def labels_raster(labels: np.ndarray, like: GeoRaster) -> GeoRaster:
    """split 라벨 배열을 래스터로 (GRF 저장용)"""
    return GeoRaster(
        data=np.asarray(labels, dtype=np.uint8),
        transform=like.transform,
        crs=like.crs,
        band_names=("split",),
    )


def restrict_to_split(raster: GeoRaster, labels: np.ndarray, split: str) -> GeoRaster:
    """split 밖의 픽셀을 nodata로 바꾼 래스터"""
    if split not in SPLIT_NAMES:
        raise ParameterError(f"Unknown split '{split}', expected one of {list(SPLIT_NAMES)}")
    labels = np.asarray(labels)
    if labels.shape != raster.shape:
        raise ParameterError(f"Label grid {labels.shape} does not match raster {raster.shape}")

    nodata = raster.nodata
    if nodata is None:
        nodata = SPLIT_NODATA if raster.dtype == "u8" else -9999.0
    outside = labels != SPLIT_NAMES[split]
    data = np.array(raster.data, copy=True)
    data[:, outside] = nodata
    return raster.with_data(data, nodata=nodata, band_names=raster.band_names)
