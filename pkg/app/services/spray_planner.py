"""
Coverage-target spray planning

예측 래스터에 임계값을 적용해 살포 영역을 정하고, 실제 weed 면적 대비 초과 살포량(excess)을 계산합니다.
"""
import bisect
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.models.raster import GeoRaster, acres
from app.services.raster_io import write_json, write_raster
from app.services.softmask_service import is_fraction_mask, weed_values
from app.utils.errors import (
    AlignmentError,
    DataValidationError,
    InfeasibleTargetError,
    ParameterError,
    UndefinedCoverageError,
)
from app.utils.parallel import map_chunks
from app.utils.setting import get_config

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# int64 로 정확히 누적할 수 있는 최대 비트 수 (초과 시 Python 정수 배열)
INT64_BITS = 62
CURVE_CHUNK = 1 << 20

SWEEP_COLUMNS = ["Threshold", "Weed %", "Land %", "Land Acres", "Excess %"]


@dataclass(frozen=True)
class CoverageCurve:
    """
    임계값(내림차순)별 누적 weed 커버리지와 살포 픽셀 수.
    weed 는 공통 2^-k 단위의 정수로 누적해 반올림 없이 정확 (이진 마스크는 픽셀 수 그대로).
    """

    thresholds: np.ndarray
    weed_units: np.ndarray
    land_pixels: np.ndarray
    total_weed_units: int
    total_land_pixels: int
    pixel_area: float
    weed_acres: float

    @property
    def weed_covered(self) -> np.ndarray:
        return np.array([int(u) / self.total_weed_units for u in self.weed_units], dtype=np.float64)

    @property
    def land_sprayed_acres(self) -> np.ndarray:
        return acres(1.0) * self.land_pixels * self.pixel_area

    @property
    def total_land_acres(self) -> float:
        return acres(self.total_land_pixels * self.pixel_area)

    def __len__(self) -> int:
        return int(self.thresholds.size)

    def index_for_threshold(self, threshold: float) -> int:
        """pred >= threshold 로 살포되는 마지막 곡선 인덱스 (-1 이면 살포 없음)"""
        ascending = self.thresholds[::-1]
        n_at_or_above = ascending.size - int(np.searchsorted(ascending, np.float32(threshold), side="left"))
        return n_at_or_above - 1


def _check_pair(pred: GeoRaster, truth: GeoRaster) -> None:
    if pred.bands != 1:
        raise DataValidationError(f"Prediction raster must be single-band, got {pred.bands} bands")
    if not pred.same_grid(truth):
        raise AlignmentError(
            f"Prediction {pred.shape} and truth {truth.shape} are not on the identical grid; align first"
        )


def weed_units(values: np.ndarray, binary: bool = False) -> np.ndarray:
    """
    weed 비율을 공통 스케일 2^-k 의 정수 배열로 바꿉니다 (f32 값은 모두 정확히 표현됨).

    이진 마스크는 픽셀 수 그대로. 합이 int64 에 들어가지 않으면 Python 정수(object) 배열.
    """
    if binary:
        return values.astype(np.int64)

    f32 = values.astype(np.float32).astype(np.float64)
    if not np.array_equal(f32, values):
        raise DataValidationError("Fraction values must be exactly representable as f32")
    nonzero = f32 > 0
    if not nonzero.any():
        return np.zeros(values.size, dtype=np.int64)

    mantissa, exponent = np.frexp(f32)
    # value = M * 2^(e - 24), M 은 24비트 정수
    mantissa = np.rint(mantissa * (1 << 24)).astype(np.int64)
    exponent = exponent.astype(np.int64) - 24
    scale = int(-exponent[nonzero].min())
    shifts = np.where(nonzero, exponent + scale, 0)

    bits = 24 + int(shifts.max()) + int(np.ceil(np.log2(values.size + 1)))
    if bits <= INT64_BITS:
        return np.where(nonzero, np.left_shift(mantissa, shifts), 0)
    logger.debug(f"Weed units need {bits} bits; accumulating with Python integers")
    return np.array(
        [int(m) << int(s) if z else 0 for m, s, z in zip(mantissa.tolist(), shifts.tolist(), nonzero.tolist())],
        dtype=object,
    )


def _bin_sums(idx: np.ndarray, weights: np.ndarray, size: int) -> np.ndarray:
    """idx 별 정수 weights 합 (정렬 후 reduceat, 부동소수점 미사용)"""
    bins = np.zeros(size, dtype=weights.dtype)
    if idx.size == 0:
        return bins
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.concatenate(([True], sorted_idx[1:] != sorted_idx[:-1])))
    bins[sorted_idx[starts]] = np.add.reduceat(weights[order], starts)
    return bins


def coverage_curve(pred: GeoRaster, truth: GeoRaster, threads: Optional[int] = None) -> CoverageCurve:
    """
    예측 내림차순으로 누적한 (weed 커버리지, 살포 면적) 곡선.

    같은 예측값의 픽셀은 함께 살포됩니다. truth 가 nodata 인 픽셀은 제외하고,
    pred 만 nodata 인 픽셀은 살포할 수 없는 면적으로 남아 전체 weed 에는 포함됩니다.

    Args:
        pred: PredictionRaster
        truth: 이진 마스크 또는 fraction 마스크 (같은 그리드)
        threads: 청크 병렬 스레드 수

    Returns:
        CoverageCurve

    Raises:
        AlignmentError: 그리드 불일치
        UndefinedCoverageError: 전체 weed 면적이 0
    """
    _check_pair(pred, truth)
    pixel_area = truth.require_transform().pixel_area

    field_valid = truth.valid_mask()
    weed = weed_values(truth)[field_valid]
    units = weed_units(weed, binary=not is_fraction_mask(truth))
    total_weed_units = int(units.sum())
    if total_weed_units == 0:
        raise UndefinedCoverageError()

    sprayable = pred.valid_mask()[field_valid]
    scores = pred.band(0)[field_valid][sprayable]
    weights = units[sprayable]
    unique = np.unique(scores)

    def histogram(start: int, stop: int) -> Tuple[np.ndarray, np.ndarray]:
        idx = np.searchsorted(unique, scores[start:stop])
        return _bin_sums(idx, weights[start:stop], unique.size), np.bincount(idx, minlength=unique.size)

    weed_bins = np.zeros(unique.size, dtype=weights.dtype)
    land_bins = np.zeros(unique.size, dtype=np.int64)
    for w, n in map_chunks(histogram, scores.size, CURVE_CHUNK, threads):
        weed_bins += w
        land_bins += n

    curve = CoverageCurve(
        thresholds=unique[::-1].copy(),
        weed_units=np.cumsum(weed_bins[::-1]),
        land_pixels=np.cumsum(land_bins[::-1]),
        total_weed_units=total_weed_units,
        total_land_pixels=int(field_valid.sum()),
        pixel_area=pixel_area,
        weed_acres=acres(float(weed.sum()) * pixel_area),
    )
    logger.debug(f"Coverage curve with {len(curve)} thresholds over {scores.size} sprayable pixels")
    return curve


def _check_target(target: float) -> float:
    target = float(target)
    if not 0 < target <= 100:
        raise ParameterError(f"Coverage target must be in (0, 100], got {target}")
    return target


def select_index(curve: CoverageCurve, target: float) -> int:
    """covered * 100 >= target * total 을 정수 연산으로 비교해 처음 만족하는 인덱스"""
    target = _check_target(target)
    ratio = Fraction(target)
    need = ratio.numerator * curve.total_weed_units
    scale = 100 * ratio.denominator

    if len(curve) == 0 or int(curve.weed_units[-1]) * scale < need:
        reached = int(curve.weed_units[-1]) / curve.total_weed_units * 100 if len(curve) else 0.0
        raise InfeasibleTargetError(target, reached)

    covered = curve.weed_units
    return bisect.bisect_left(range(len(curve)), True, key=lambda i: int(covered[i]) * scale >= need)


def select_threshold(curve: CoverageCurve, target: float) -> float:
    """
    커버리지 target(%) 이상을 달성하는 가장 큰 임계값 (보간 없음)
    """
    return float(curve.thresholds[select_index(curve, target)])


@dataclass
class SprayPlan:
    threshold: float
    target_coverage: float
    achieved_coverage: float
    land_sprayed: float
    land_pct: float
    weed_area: float
    excess_pct: float
    total_land: float
    sprayed_pixels: int
    mode: str = "same-data"
    below_target: bool = False
    spray_mask: Optional[GeoRaster] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> Dict:
        return {
            "threshold": self.threshold,
            "target_coverage": self.target_coverage,
            "achieved_coverage": self.achieved_coverage,
            "land_sprayed_acres": self.land_sprayed,
            "land_pct": self.land_pct,
            "weed_acres": self.weed_area,
            "excess_pct": self.excess_pct,
            "total_land_acres": self.total_land,
            "sprayed_pixels": self.sprayed_pixels,
            "mode": self.mode,
            "below_target": self.below_target,
        }

    def table_row(self) -> Dict:
        return {
            "Threshold": self.threshold,
            "Weed %": self.achieved_coverage,
            "Land %": self.land_pct,
            "Land Acres": self.land_sprayed,
            "Excess %": self.excess_pct,
        }


def excess_pct(land_acres: float, weed_acres: float) -> float:
    """(살포 면적 - weed 면적) / weed 면적 x 100"""
    if weed_acres <= 0:
        raise UndefinedCoverageError()
    return (land_acres - weed_acres) / weed_acres * 100.0


def spray_mask(pred: GeoRaster, threshold: float) -> GeoRaster:
    """pred >= threshold (nodata 픽셀은 살포 안 함)"""
    band = pred.band(0)
    mask = (band >= np.float32(threshold)) & pred.valid_mask()
    return GeoRaster(
        data=mask.astype(np.uint8),
        transform=pred.transform,
        crs=pred.crs,
        band_names=("spray",),
    )


def _plan_at(curve: CoverageCurve, pred: GeoRaster, threshold: float, target: float, mode: str) -> SprayPlan:
    index = curve.index_for_threshold(threshold)
    covered = int(curve.weed_units[index]) if index >= 0 else 0
    pixels = int(curve.land_pixels[index]) if index >= 0 else 0

    achieved = covered / curve.total_weed_units * 100.0
    land = acres(pixels * curve.pixel_area)
    ratio = Fraction(target)
    below = covered * 100 * ratio.denominator < ratio.numerator * curve.total_weed_units

    plan = SprayPlan(
        threshold=float(threshold),
        target_coverage=target,
        achieved_coverage=achieved,
        land_sprayed=land,
        land_pct=pixels / curve.total_land_pixels * 100.0,
        weed_area=curve.weed_acres,
        excess_pct=excess_pct(land, curve.weed_acres),
        total_land=curve.total_land_acres,
        sprayed_pixels=pixels,
        mode=mode,
        below_target=bool(below),
        spray_mask=spray_mask(pred, threshold),
    )
    if below:
        logger.warning(
            f"Transferred threshold {threshold:.6g} reaches {achieved:.2f}% coverage, below target {target}%"
        )
    return plan


def make_plan(
    pred: GeoRaster,
    truth: GeoRaster,
    target: float,
    threshold: Optional[float] = None,
    curve: Optional[CoverageCurve] = None,
    threads: Optional[int] = None,
) -> SprayPlan:
    """
    SprayPlan 생성.

    threshold 를 생략하면 같은 데이터에서 선택하고 (same-data),
    다른 데이터에서 고른 threshold 를 주면 그대로 적용합니다 (transfer; 커버리지 미달 시 below_target).
    """
    target = _check_target(target)
    curve = curve or coverage_curve(pred, truth, threads)
    mode = "transfer"
    if threshold is None:
        threshold = select_threshold(curve, target)
        mode = "same-data"

    plan = _plan_at(curve, pred, threshold, target, mode)
    logger.info(
        f"Plan @{target}% ({mode}): threshold={plan.threshold:.6g}, coverage={plan.achieved_coverage:.2f}%, "
        f"land={plan.land_pct:.2f}%, excess={plan.excess_pct:.2f}%"
    )
    return plan


def plan_transfer(
    select_pred: GeoRaster,
    select_truth: GeoRaster,
    eval_pred: GeoRaster,
    eval_truth: GeoRaster,
    target: float,
    threads: Optional[int] = None,
) -> SprayPlan:
    """held-out 에서 threshold 를 고르고 test 에서 평가"""
    threshold = select_threshold(coverage_curve(select_pred, select_truth, threads), target)
    return make_plan(eval_pred, eval_truth, target, threshold=threshold, threads=threads)


def coverage_sweep(
    pred: GeoRaster,
    truth: GeoRaster,
    targets: Optional[Sequence[float]] = None,
    select_on: Optional[Tuple[GeoRaster, GeoRaster]] = None,
    threads: Optional[int] = None,
) -> List[SprayPlan]:
    """
    목표별 SprayPlan 행 (Threshold, Weed %, Land %, Land Acres, Excess %)

    Args:
        pred, truth: 평가 데이터
        targets: 커버리지 목표 목록 (기본 설정값 90, 95, 98, 99)
        select_on: (pred, truth) 를 주면 그 데이터에서 임계값을 고른다
    """
    targets = sorted(_check_target(t) for t in (targets or get_config().TARGETS))
    curve = coverage_curve(pred, truth, threads)
    select_curve = coverage_curve(*select_on, threads) if select_on is not None else None

    plans = []
    for target in targets:
        if select_curve is None:
            plans.append(make_plan(pred, truth, target, curve=curve))
        else:
            threshold = select_threshold(select_curve, target)
            plans.append(make_plan(pred, truth, target, threshold=threshold, curve=curve))
    return plans


def sweep_frame(plans: Sequence[SprayPlan]) -> pd.DataFrame:
    return pd.DataFrame([plan.table_row() for plan in plans], columns=SWEEP_COLUMNS)


def render_sweep(plans: Sequence[SprayPlan]) -> str:
    frame = sweep_frame(plans)
    formatters = {
        "Threshold": "{:.4g}".format,
        "Weed %": "{:.2f}%".format,
        "Land %": "{:.2f}%".format,
        "Land Acres": "{:.2f}".format,
        "Excess %": "{:.2f}%".format,
    }
    return frame.to_string(index=False, formatters=formatters)


def write_sweep_csv(plans: Sequence[SprayPlan], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sweep_frame(plans).to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


def excess_from_land_pct(
    field_acres: float,
    weed_acres: float,
    land_pcts: Sequence[float],
) -> List[Dict[str, float]]:
    """
    표의 Land % 열만으로 Land Acres 와 Excess % 를 다시 계산합니다.
    (예: 50 acre 필드, weed 2.45 acre, Land 42% -> excess 757%)
    """
    rows = []
    for pct in land_pcts:
        land = field_acres * float(pct) / 100.0
        rows.append({"land_pct": float(pct), "land_acres": land, "excess_pct": excess_pct(land, weed_acres)})
    return rows


def mask_runs(mask: np.ndarray) -> List[Dict[str, int]]:
    """
    이진 마스크를 축 정렬 사각형으로 분해합니다.
    행마다 연속 구간(run)을 찾고, 바로 윗행과 같은 [col, col+width) 구간이면 세로로 이어 붙입니다.

    Returns:
        {"row", "col", "height", "width"} 목록 (시작 행, 열 순)
    """
    mask = np.asarray(mask, dtype=bool)
    rects: List[Dict[str, int]] = []
    open_runs: Dict[Tuple[int, int], int] = {}

    for r in range(mask.shape[0]):
        padded = np.concatenate(([False], mask[r], [False])).astype(np.int8)
        edges = np.flatnonzero(np.diff(padded))
        runs = list(zip(edges[0::2].tolist(), edges[1::2].tolist()))

        next_open = {}
        for start, stop in runs:
            key = (start, stop)
            if key in open_runs:
                index = open_runs[key]
                rects[index]["height"] += 1
            else:
                index = len(rects)
                rects.append({"row": r, "col": start, "height": 1, "width": stop - start})
            next_open[key] = index
        open_runs = next_open

    return rects


def export_plan(plan: SprayPlan, out_dir: PathLike) -> Dict[str, str]:
    """
    spray mask GRF, plan.json (SprayPlan 전 필드), runs.json (살포 사각형 목록) 저장
    """
    if plan.spray_mask is None:
        raise ParameterError("Plan has no spray mask to export")
    out_dir = Path(out_dir)
    mask = plan.spray_mask
    transform = mask.require_transform()

    rects = mask_runs(mask.band(0))
    for rect in rects:
        x0, y0 = transform.origin_x + rect["col"] * transform.pixel_w, transform.origin_y - rect["row"] * transform.pixel_h
        rect["bounds"] = [
            x0,
            y0 - rect["height"] * transform.pixel_h,
            x0 + rect["width"] * transform.pixel_w,
            y0,
        ]

    paths = {
        "spray_mask": str(write_raster(mask, out_dir / "spray_mask.grf")),
        "plan": str(write_json(plan.to_dict(), out_dir / "plan.json")),
        "runs": str(write_json({"crs": mask.crs, "rectangles": rects}, out_dir / "runs.json")),
    }
    logger.info(f"Exported plan with {len(rects)} rectangles to {out_dir}")
    return paths
