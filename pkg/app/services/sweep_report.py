"""
Segmentation model registry, best-per-loss tables and the performance landscape
"""
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
import pandas as pd
from matplotlib.figure import Figure
from pydantic import ValidationError

from app.models.raster import GeoRaster
from app.models.schemas import ModelRecord, target_key
from app.services.raster_io import dumps_json, read_json
from app.services.spray_planner import coverage_curve, make_plan, select_threshold
from app.utils.errors import IntegrityError, ParameterError, SchemaError
from app.utils.setting import get_config

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# 접두어 규칙으로 묶이지 않는 인코더 이름
ENCODER_GROUP_OVERRIDES = {
    "MIT_b0": "MIT",
    "TIMM_REGNETX_002": "TIMM_REGNETX",
}
_PREFIX_PATTERN = re.compile(r"^[A-Za-z_]+")

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)
MARKERS = ("o", "s", "^", "D", "v", "P", "X", "*")
MARKER_AREA = 240.0

# 공개된 모델 sweep 결과 (Size MB, 상대 속도, 목표별 excess %).
# 마지막 5개는 UNET loss 별 최고 모델 표에만 있는 행 (크기/속도 미공개)
PUBLISHED_SWEEP: Tuple[Dict, ...] = tuple(
    {
        "architecture": arch,
        "encoder": encoder,
        "loss": loss,
        "size_mb": size,
        "relative_speed": speed,
        "excess": {"90": e90, "95": e95, "98": e98, "99": e99},
    }
    for arch, encoder, loss, size, speed, e90, e95, e98, e99 in (
        ("UNET++", "VGG19", "BCE", 179, 1.0, -4.11, 6.30, 18.63, 28.09),
        ("UNET++", "VGG16", "Focal", 158, 1.3, -3.74, 6.98, 18.99, 28.36),
        ("UNET++", "VGG16", "SoftBCE", 158, 1.5, -4.24, 6.14, 18.43, 28.45),
        ("UNET", "VGG19", "BCE", 116, 4.4, -3.77, 6.73, 19.33, 29.22),
        ("UNET", "VGG19", "Focal", 116, 3.0, -4.63, 6.04, 19.30, 29.82),
        ("FPN", "VGG16", "Focal", 67, 3.0, -3.10, 8.35, 21.59, 31.83),
        ("UNET", "MIT_b0", "SoftBCE", 22, 1.6, -2.58, 8.45, 21.98, 33.02),
        ("UNET", "VGG13", "BCE", 74, 5.06, -1.95, 9.73, 23.48, 34.63),
        ("FPN", "MIT_b0", "Focal", 20, 2.55, -2.65, 9.25, 23.72, 35.11),
        ("FPN", "MIT_b0", "BCE", 20, 2.58, -1.54, 11.00, 26.14, 37.90),
        ("UNET", "VGG11", "BCE", 73, 6.18, -1.68, 11.03, 26.51, 38.84),
        ("UNET", "TIMM_REGNETX_002", "BCE", 19, 8.46, -1.56, 10.83, 26.58, 39.85),
        ("UNET", "VGG16", "SoftBCE", None, None, -4.2, 6.1, 20.0, 31.5),
        ("UNET", "VGG16", "Lovasz", None, None, -3.3, 6.3, 22.0, 51.3),
        ("UNET", "DenseNet169", "Tversky", None, None, 0.3, 12.1, 71.4, 413.0),
        ("UNET", "DenseNet169", "Dice", None, None, -2.6, 10.0, 91.0, 435.0),
        ("UNET", "TIMM_REGNETX_002", "Jaccard", None, None, -0.24, 12.3, 98.0, 1195.0),
    )
)


def encoder_group(encoder: str) -> str:
    """
    인코더 그룹: 첫 숫자 앞의 알파벳 접두어 (VGG16 -> VGG, DenseNet169 -> DenseNet).
    ENCODER_GROUP_OVERRIDES 가 우선.
    """
    if encoder in ENCODER_GROUP_OVERRIDES:
        return ENCODER_GROUP_OVERRIDES[encoder]
    match = _PREFIX_PATTERN.match(encoder)
    prefix = match.group(0).strip("_") if match else ""
    return prefix or encoder


def published_records() -> List[ModelRecord]:
    return [ModelRecord.model_validate(row) for row in PUBLISHED_SWEEP]


def validate_record(metadata) -> ModelRecord:
    if isinstance(metadata, ModelRecord):
        record = metadata
    else:
        try:
            record = ModelRecord.model_validate(metadata)
        except ValidationError as e:
            raise SchemaError(f"Invalid model record: {e}") from None
    expected = get_config().REGISTRY_SCHEMA_VERSION
    if record.schema_version != expected:
        raise SchemaError(f"Unsupported record schema version {record.schema_version}, expected {expected}")
    return record


class Registry:
    """
    registry 디렉토리 (레코드 하나당 JSON 파일 하나).
    쓰기는 프로세스 내 단일 writer 락을 거쳐 임시 파일 -> rename 으로 반영.
    """

    _write_lock = Lock()

    def __init__(self, root: PathLike):
        self.root = Path(root)

    def path_for(self, record: ModelRecord) -> Path:
        return self.root / f"{record.slug}.json"

    def records(self) -> List[ModelRecord]:
        """파일 이름 순으로 로드"""
        if not self.root.exists():
            return []
        records = []
        for path in sorted(self.root.glob("*.json")):
            try:
                records.append(validate_record(read_json(path)))
            except SchemaError as e:
                raise SchemaError(f"{path}: {e.message}") from None
        logger.debug(f"Loaded {len(records)} records from {self.root}")
        return records

    def append(self, record: ModelRecord) -> Path:
        record = validate_record(record)
        path = self.path_for(record)
        payload = dumps_json(record.model_dump(mode="json"))

        with self._write_lock:
            self.root.mkdir(parents=True, exist_ok=True)
            if path.exists():
                logger.info(f"Replacing registry record {path.name}")
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fp:
                fp.write(payload)
            os.replace(tmp, path)
        return path


def compute_excess(
    prediction: GeoRaster,
    truth: GeoRaster,
    targets: Sequence[float],
    heldout: Optional[Tuple[GeoRaster, GeoRaster]] = None,
) -> Dict[str, float]:
    """목표별 excess: heldout 에서 임계값 선택 후 (prediction, truth) 에서 평가"""
    curve = coverage_curve(prediction, truth)
    select_curve = coverage_curve(*heldout) if heldout is not None else curve
    excess = {}
    for target in targets:
        threshold = select_threshold(select_curve, target)
        plan = make_plan(prediction, truth, target, threshold=threshold, curve=curve)
        excess[target_key(target)] = plan.excess_pct
    return excess


def ingest_record(
    metadata,
    prediction: Optional[GeoRaster] = None,
    truth: Optional[GeoRaster] = None,
    heldout: Optional[Tuple[GeoRaster, GeoRaster]] = None,
    targets: Optional[Sequence[float]] = None,
    tolerance: Optional[float] = None,
) -> ModelRecord:
    """
    메타데이터를 검증해 ModelRecord 를 만듭니다.

    prediction 이 있으면 excess 를 다시 계산하고 (status "computed"),
    메타데이터에 선언된 값과 tolerance 이상 다르면 IntegrityError.
    없으면 선언 값을 그대로 사용합니다 (status "declared").

    Args:
        metadata: dict 또는 ModelRecord
        prediction: test 예측 래스터
        truth: test 정답 마스크
        heldout: 임계값 선택용 (pred, truth). 생략 시 같은 데이터에서 선택
        targets: 계산할 목표 (기본: 선언된 목표, 없으면 설정값)
        tolerance: 허용 오차 (% 포인트)
    """
    record = validate_record(metadata)
    if prediction is None:
        return record.model_copy(update={"status": "declared"})
    if truth is None:
        raise ParameterError("Recomputing excess requires a truth raster")

    tolerance = get_config().INTEGRITY_TOLERANCE if tolerance is None else tolerance
    targets = targets or [float(k) for k in record.excess] or list(get_config().TARGETS)
    computed = compute_excess(prediction, truth, targets, heldout)

    mismatches = {
        key: (record.excess[key], value)
        for key, value in computed.items()
        if key in record.excess and abs(record.excess[key] - value) > tolerance
    }
    if mismatches:
        detail = ", ".join(f"@{k}: declared {d:.4f} vs computed {c:.4f}" for k, (d, c) in sorted(mismatches.items()))
        raise IntegrityError(f"{record.name} excess does not match recomputation ({detail})")

    logger.info(f"Ingested {record.name} with computed excess {computed}")
    return record.model_copy(update={"excess": computed, "status": "computed"})


def _sort_key(record: ModelRecord, target: float):
    size = record.size_mb if record.size_mb is not None else float("inf")
    return (record.excess_at(target), size, record.name)


def _with_target(records: Sequence[ModelRecord], target: float) -> List[ModelRecord]:
    usable = [r for r in records if r.excess_at(target) is not None]
    if len(usable) < len(records):
        logger.warning(f"{len(records) - len(usable)} records have no excess at {target}% and were skipped")
    return usable


def _filter_architecture(records: Sequence[ModelRecord], architecture: Optional[str]) -> List[ModelRecord]:
    if architecture is None:
        return list(records)
    return [r for r in records if r.architecture == architecture]


@dataclass
class SweepReport:
    target: float
    architecture: Optional[str]
    records: List[ModelRecord] = field(default_factory=list)
    best: List[ModelRecord] = field(default_factory=list)

    def to_dict(self) -> Dict:
        def row(record: ModelRecord) -> Dict:
            return {
                "name": record.name,
                "architecture": record.architecture,
                "encoder": record.encoder,
                "encoder_group": encoder_group(record.encoder),
                "loss": record.loss,
                "size_mb": record.size_mb,
                "relative_speed": record.relative_speed,
                "excess": record.excess,
                "status": record.status,
            }

        return {
            "target": self.target,
            "architecture": self.architecture,
            "best_per_loss": [row(r) for r in self.best],
            "records": [row(r) for r in self.records],
        }


def build_report(
    records: Sequence[ModelRecord],
    target: float = 99.0,
    architecture: Optional[str] = None,
) -> SweepReport:
    """
    전체 보기 (target 의 excess, size, 이름 순)와 loss 별 최고 모델 보기를 함께 만듭니다.
    """
    if not records:
        raise ParameterError("Registry is empty")
    target = float(target)
    filtered = _with_target(_filter_architecture(records, architecture), target)
    ordered = sorted(filtered, key=lambda r: _sort_key(r, target))

    best: Dict[str, ModelRecord] = {}
    for record in ordered:
        best.setdefault(record.loss, record)

    return SweepReport(
        target=target,
        architecture=architecture,
        records=ordered,
        best=sorted(best.values(), key=lambda r: _sort_key(r, target)),
    )


def best_per_loss(
    records: Sequence[ModelRecord],
    architecture: Optional[str] = None,
    target: float = 99.0,
) -> SweepReport:
    return build_report(records, target=target, architecture=architecture)


def best_loss_per_target(
    records: Sequence[ModelRecord],
    targets: Optional[Sequence[float]] = None,
    architecture: Optional[str] = None,
) -> Dict[str, Dict]:
    """목표별로 excess 가 가장 작은 모델 (loss 기준 표의 굵은 글씨 셀)"""
    targets = targets or get_config().TARGETS
    filtered = _filter_architecture(records, architecture)
    winners = {}
    for target in targets:
        candidates = _with_target(filtered, target)
        if not candidates:
            continue
        winner = min(candidates, key=lambda r: _sort_key(r, target))
        winners[target_key(target)] = {
            "loss": winner.loss,
            "name": winner.name,
            "excess_pct": winner.excess_at(target),
        }
    return winners


def extra_acres(record: ModelRecord, best: ModelRecord, weed_acres: float, target: float = 99.0) -> float:
    """best 대비 추가 살포 면적 (acre): excess 차이 x weed 면적"""
    a, b = record.excess_at(target), best.excess_at(target)
    if a is None or b is None:
        raise ParameterError(f"Both records need an excess value at {target}%")
    return (a - b) / 100.0 * weed_acres


def render_report(report: SweepReport) -> str:
    t = target_key(report.target)

    def frame(records: Sequence[ModelRecord], columns: Sequence[str]) -> str:
        rows = []
        for r in records:
            row = {
                "Model": r.architecture,
                "Encoder": r.encoder,
                "Loss": r.loss,
                "Size": f"{r.size_mb:g}MB" if r.size_mb is not None else "-",
                "Speed": f"{r.relative_speed:g}" if r.relative_speed is not None else "-",
            }
            for key in sorted(r.excess, key=float):
                row[f"{key}%"] = f"{r.excess[key]:.2f}%"
            rows.append(row)
        table = pd.DataFrame(rows)
        return table[[c for c in columns if c in table.columns] + [c for c in table.columns if c.endswith("%")]].to_string(index=False)

    parts = [f"Best per loss (excess @{t}%)", frame(report.best, ["Loss", "Encoder"])]
    parts += ["", f"All records (sorted by excess @{t}%)", frame(report.records, ["Model", "Encoder", "Loss", "Size", "Speed"])]
    return "\n".join(parts)


def landscape_frame(records: Sequence[ModelRecord], target: float = 99.0) -> pd.DataFrame:
    """
    산점도에 그리는 모든 값을 담은 표.
    색은 인코더 그룹, 마커 모양은 아키텍처의 첫 등장 순서로 고정.
    크기나 속도가 없는 레코드는 그릴 수 없어 제외.
    """
    usable = [r for r in _with_target(records, target) if r.size_mb is not None and r.relative_speed is not None]
    if len(usable) < len(records):
        logger.info(f"Landscape skips {len(records) - len(usable)} records without excess, size or speed")
    usable.sort(key=lambda r: r.name)
    if not usable:
        raise ParameterError(f"No records with excess at {target}%")

    colors: Dict[str, str] = {}
    shapes: Dict[str, str] = {}
    rows = []
    for r in usable:
        group = encoder_group(r.encoder)
        colors.setdefault(group, PALETTE[len(colors) % len(PALETTE)])
        shapes.setdefault(r.architecture, MARKERS[len(shapes) % len(MARKERS)])
        rows.append(
            {
                "name": r.name,
                "architecture": r.architecture,
                "encoder": r.encoder,
                "encoder_group": group,
                "loss": r.loss,
                "size_mb": r.size_mb,
                "relative_speed": r.relative_speed,
                "excess_pct": r.excess_at(target),
                "marker_size": MARKER_AREA / r.relative_speed,
                "color": colors[group],
                "marker": shapes[r.architecture],
            }
        )
    return pd.DataFrame(rows)


def landscape_plot(
    records: Sequence[ModelRecord],
    svg_path: Optional[PathLike] = None,
    csv_path: Optional[PathLike] = None,
    target: float = 99.0,
) -> pd.DataFrame:
    """
    size vs excess 산점도 (마커 크기 = 추론 시간 ~ 1/relative_speed).
    같은 registry 면 SVG / CSV 가 바이트 단위로 동일.
    """
    frame = landscape_frame(records, target)

    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(csv_path, index=False, float_format="%.6g", lineterminator="\n")

    if svg_path is not None:
        svg_path = Path(svg_path)
        svg_path.parent.mkdir(parents=True, exist_ok=True)
        with matplotlib.rc_context({"svg.hashsalt": "spraygrid", "svg.fonttype": "none"}):
            fig = Figure(figsize=(8, 5))
            ax = fig.add_subplot()
            for _, row in frame.iterrows():
                ax.scatter(
                    row["size_mb"],
                    row["excess_pct"],
                    s=row["marker_size"],
                    c=row["color"],
                    marker=row["marker"],
                    alpha=0.8,
                    edgecolors="black",
                    linewidths=0.5,
                )
            for group, color in dict(zip(frame["encoder_group"], frame["color"])).items():
                ax.scatter([], [], c=color, marker="o", label=group)
            for arch, marker in dict(zip(frame["architecture"], frame["marker"])).items():
                ax.scatter([], [], c="white", edgecolors="black", marker=marker, label=arch)
            ax.set_xlabel("Model size (MB)")
            ax.set_ylabel(f"Excess spraying @{target_key(target)}% (%)")
            ax.grid(True, linewidth=0.3)
            ax.legend(loc="best", fontsize="small")
            fig.tight_layout()
            fig.savefig(svg_path, format="svg", metadata={"Date": None})

    logger.info(f"Landscape plot with {len(frame)} markers, {frame['encoder_group'].nunique()} encoder groups")
    return frame
