"""
FeatureTable: per-pixel Sentinel-2 feature vectors with weed-fraction targets
"""
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd

from app.models.raster import BandSet, GeoRaster
from app.services.softmask_service import SPLIT_NAMES, SPLIT_NODATA
from app.utils.errors import AlignmentError, DataValidationError, ParameterError, RasterFormatError, SchemaError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FEATURE_COLUMNS = list(BandSet.COLUMNS)
TABLE_COLUMNS = FEATURE_COLUMNS + ["target", "split"]
SPLIT_LABELS = {value: name for name, value in SPLIT_NAMES.items()}

PREDICTION_NODATA = -9999.0


def band_set_for(sat: GeoRaster, bands: Optional[BandSet] = None) -> BandSet:
    """bands 미지정 시 band_names 로부터, 이름이 없으면 기본 순서"""
    if bands is not None:
        return bands
    if sat.band_names:
        return BandSet.from_band_names(sat.band_names)
    if sat.bands != len(BandSet.ROLES):
        raise ParameterError(f"Satellite raster has {sat.bands} unnamed bands; expected {len(BandSet.ROLES)}")
    return BandSet()


def _feature_cube(sat: GeoRaster, bands: BandSet) -> np.ndarray:
    """(height, width, 10) float64 피처"""
    indices = bands.ordered_indices()
    if max(indices) >= sat.bands:
        raise ParameterError(f"BandSet refers to band {max(indices)} but raster has {sat.bands} bands")
    return np.moveaxis(sat.data[indices].astype(np.float64), 0, -1)


def build_feature_table(
    sat: GeoRaster,
    fraction: GeoRaster,
    labels: np.ndarray,
    bands: Optional[BandSet] = None,
) -> pd.DataFrame:
    """
    위성 래스터, fraction mask, split 라벨로 FeatureTable 을 만듭니다.
    nodata 가 하나라도 있는 픽셀은 제외하며 행 순서는 row-major 픽셀 순서.

    Args:
        sat: 10밴드 위성 래스터 (fraction 과 같은 그리드)
        fraction: 단일 밴드 f32 weed fraction
        labels: (height, width) split 라벨

    Returns:
        컬럼 b,g,r,nir,vre1,vre2,vre3,nnir,swir1,swir2,target,split 의 DataFrame
    """
    if not sat.same_grid(fraction):
        raise AlignmentError("Satellite raster and fraction mask must share the same grid; align first")
    labels = np.asarray(labels)
    if labels.shape != fraction.shape:
        raise AlignmentError(f"Split labels {labels.shape} do not match grid {fraction.shape}")
    bands = band_set_for(sat, bands)

    valid = sat.valid_mask() & fraction.valid_mask() & (labels != SPLIT_NODATA)
    features = _feature_cube(sat, bands)[valid]
    target = fraction.band(0).astype(np.float64)[valid]

    table = pd.DataFrame(features, columns=FEATURE_COLUMNS)
    table["target"] = target
    table["split"] = [SPLIT_LABELS[int(v)] for v in labels[valid]]
    validate_feature_table(table)

    counts = table["split"].value_counts().to_dict()
    logger.info(f"Built feature table with {len(table)} rows ({int((~valid).sum())} pixels skipped): {counts}")
    return table


def validate_feature_table(table: pd.DataFrame) -> pd.DataFrame:
    if list(table.columns) != TABLE_COLUMNS:
        raise SchemaError(f"FeatureTable columns must be {TABLE_COLUMNS}, got {list(table.columns)}")
    numeric = table[FEATURE_COLUMNS + ["target"]]
    if numeric.isna().any().any() or not np.isfinite(numeric.to_numpy(dtype=np.float64)).all():
        raise DataValidationError("FeatureTable contains missing or non-finite values")
    target = table["target"].to_numpy(dtype=np.float64)
    if target.size and (target.min() < 0 or target.max() > 1):
        raise DataValidationError(f"Targets must lie in [0, 1], found [{target.min()}, {target.max()}]")
    unknown = set(table["split"].unique()) - set(SPLIT_NAMES)
    if unknown:
        raise DataValidationError(f"Unknown split labels {sorted(unknown)}")
    return table


def features_and_target(table: pd.DataFrame, split: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    """split 의 (X, y). split=None 이면 전체"""
    if split is not None:
        if split not in SPLIT_NAMES:
            raise ParameterError(f"Unknown split '{split}', expected one of {list(SPLIT_NAMES)}")
        table = table[table["split"] == split]
    return table[FEATURE_COLUMNS].to_numpy(dtype=np.float64), table["target"].to_numpy(dtype=np.float64)


def write_feature_csv(table: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    validate_feature_table(table).to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    return path


def read_feature_csv(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise RasterFormatError(f"Feature table not found: {path}")
    try:
        table = pd.read_csv(path, dtype={"split": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"Invalid feature CSV {path}: {e}") from None
    return validate_feature_table(table)


def write_feature_cache(table: pd.DataFrame, path: PathLike) -> Path:
    """바이너리 캐시 (.npz): features float64, target float64, split uint8"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    validate_feature_table(table)
    with path.open("wb") as fp:
        np.savez(
            fp,
            features=table[FEATURE_COLUMNS].to_numpy(dtype=np.float64),
            target=table["target"].to_numpy(dtype=np.float64),
            split=table["split"].map(SPLIT_NAMES).to_numpy(dtype=np.uint8),
        )
    return path


def read_feature_cache(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise RasterFormatError(f"Feature cache not found: {path}")
    with np.load(path) as payload:
        try:
            features, target, split = payload["features"], payload["target"], payload["split"]
        except KeyError as e:
            raise SchemaError(f"Feature cache {path} is missing array {e}") from None
    if features.ndim != 2 or features.shape[1] != len(FEATURE_COLUMNS):
        raise SchemaError(f"Feature cache {path} has feature shape {features.shape}")
    table = pd.DataFrame(features, columns=FEATURE_COLUMNS)
    table["target"] = target
    table["split"] = [SPLIT_LABELS.get(int(v), str(v)) for v in split]
    return validate_feature_table(table)


def read_feature_table(path: PathLike) -> pd.DataFrame:
    """확장자로 CSV / npz 캐시 구분"""
    if Path(path).suffix == ".npz":
        return read_feature_cache(path)
    return read_feature_csv(path)


def predict_raster(model, sat: GeoRaster, bands: Optional[BandSet] = None) -> GeoRaster:
    """
    모든 유효 위성 픽셀에 모델을 적용한 PredictionRaster (f32, nodata -9999)
    """
    bands = band_set_for(sat, bands)
    valid = sat.valid_mask()
    out = np.full(sat.shape, PREDICTION_NODATA, dtype=np.float32)
    if valid.any():
        out[valid] = model.predict(_feature_cube(sat, bands)[valid]).astype(np.float32)

    nodata = PREDICTION_NODATA if not valid.all() else None
    logger.info(f"Predicted {int(valid.sum())} pixels with {model!r}")
    return GeoRaster(data=out, transform=sat.transform, crs=sat.crs, nodata=nodata, band_names=("prediction",))
