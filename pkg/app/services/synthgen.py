"""
Deterministic synthetic weed fields

드론 마스크 -> fraction mask -> 위성 10밴드 -> 노이즈 예측 래스터를 한 seed 로 생성합니다.
스펙트럼은 클래스별 가우시안 혼합이며 물리적 복사 모델이 아닙니다.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from app.models.raster import BandSet, GeoRaster, GeoTransform
from app.models.schemas import FieldSpec
from app.services.raster_io import write_json, write_raster
from app.services.softmask_service import area_report, block_fraction
from app.utils.errors import GenerationError
from app.utils.parallel import map_chunks

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# 패치가 명목 반지름의 몇 배까지 커질 수 있는지
MAX_PATCH_SCALE = 10.0
ROW_CHUNK = 128
SAT_TILE_ROWS = 64

# SeedSequence 하위 스트림 번호
STREAM_PATCHES, STREAM_SATELLITE, STREAM_PREDICTION, STREAM_DRONE_PREDICTION = range(4)


@dataclass(frozen=True)
class Patch:
    x: float
    y: float
    a: float
    b: float
    angle: float

    def to_dict(self) -> Dict[str, float]:
        return {"x": self.x, "y": self.y, "a": self.a, "b": self.b, "angle": self.angle}


@dataclass
class SyntheticField:
    spec: FieldSpec
    drone_mask: GeoRaster
    fraction: GeoRaster
    satellite: GeoRaster
    prediction: Optional[GeoRaster] = None
    drone_prediction: Optional[GeoRaster] = None
    patches: List[Patch] = field(default_factory=list)


def _rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, *extra]))


def sample_patches(spec: FieldSpec) -> List[Patch]:
    """필드 안에 무작위 타원 패치 (중심, 장축/단축 반지름, 회전각)"""
    rng = _rng(spec.seed, STREAM_PATCHES)
    ox, oy = spec.origin
    width_m, height_m = spec.extent_m
    patches = []
    for _ in range(spec.weed_patch_count):
        x = ox + rng.uniform(0, width_m)
        y = oy - rng.uniform(0, height_m)
        a = max(spec.drone_pixel, rng.normal(spec.patch_radius_mean, spec.patch_radius_std))
        aspect = rng.uniform(1.0, spec.patch_aspect_max)
        patches.append(Patch(x=x, y=y, a=a, b=a / aspect, angle=rng.uniform(0, np.pi)))
    return patches


def patch_distance(patches: List[Patch], transform: GeoTransform, height: int, width: int, threads=None) -> np.ndarray:
    """
    픽셀 중심마다 가장 가까운 패치의 정규화 타원 거리 제곱 q (q <= s^2 이면 배율 s 패치 안)
    """
    cols = np.arange(width, dtype=np.float64)

    def run(start: int, stop: int) -> np.ndarray:
        rows = np.arange(start, stop, dtype=np.float64)
        xs, ys = transform.pixel_to_ground(cols[np.newaxis, :], rows[:, np.newaxis])
        q = np.full((stop - start, width), np.inf)
        for p in patches:
            dx, dy = xs - p.x, ys - p.y
            cos, sin = np.cos(p.angle), np.sin(p.angle)
            u = (dx * cos + dy * sin) / p.a
            v = (-dx * sin + dy * cos) / p.b
            np.minimum(q, u * u + v * v, out=q)
        return q

    return np.vstack(map_chunks(run, height, ROW_CHUNK, threads))


def _weed_mask(q: np.ndarray, n_weed: int) -> np.ndarray:
    """q 가 작은 순서로 정확히 n_weed 픽셀 (동률은 row-major 앞쪽 우선)"""
    flat = q.reshape(-1)
    mask = np.zeros(flat.size, dtype=bool)
    if n_weed == 0:
        return mask.reshape(q.shape)

    cutoff = np.partition(flat, n_weed - 1)[n_weed - 1]
    if cutoff > MAX_PATCH_SCALE ** 2:
        raise GenerationError(
            f"Patches cannot reach {n_weed} weed pixels without growing beyond {MAX_PATCH_SCALE}x their radius"
        )
    mask[flat < cutoff] = True
    ties = np.flatnonzero(flat == cutoff)
    mask[ties[: n_weed - int(mask.sum())]] = True
    return mask.reshape(q.shape)


def _satellite_bands(spec: FieldSpec, fraction: np.ndarray, threads=None) -> np.ndarray:
    """
    픽셀마다 crop / weed 반사율을 각각 샘플링해 weed fraction 으로 섞는다.
    타일마다 별도 seed 스트림.
    """
    height, width = fraction.shape
    roles = BandSet.ROLES
    crop_mean = np.array([spec.spectral_profiles[r].crop_mean for r in roles])
    crop_std = np.array([spec.spectral_profiles[r].crop_std for r in roles])
    weed_mean = np.array([spec.spectral_profiles[r].weed_mean for r in roles])
    weed_std = np.array([spec.spectral_profiles[r].weed_std for r in roles])

    def tile(start: int, stop: int) -> np.ndarray:
        rng = _rng(spec.seed, STREAM_SATELLITE, start // SAT_TILE_ROWS)
        shape = (len(roles), stop - start, width)
        crop = crop_mean[:, None, None] + crop_std[:, None, None] * rng.standard_normal(shape)
        weed = weed_mean[:, None, None] + weed_std[:, None, None] * rng.standard_normal(shape)
        f = fraction[start:stop][np.newaxis]
        return (1.0 - f) * crop + f * weed

    return np.concatenate(map_chunks(tile, height, SAT_TILE_ROWS, threads), axis=1).astype(np.float32)


def noisy_prediction(fraction: np.ndarray, snr: float, seed: int, stream: int = STREAM_PREDICTION) -> np.ndarray:
    """fraction + N(0, (std(fraction)/snr)^2), [0, 1] 로 clip"""
    rng = _rng(seed, stream)
    sigma = float(fraction.std()) / snr
    noise = rng.standard_normal(fraction.shape)
    return np.clip(fraction + sigma * noise, 0.0, 1.0).astype(np.float32)


def generate(spec: Optional[FieldSpec] = None, threads: Optional[int] = None) -> SyntheticField:
    """
    FieldSpec 으로 합성 필드를 생성합니다.

    weed 픽셀 수는 round(target_weed_fraction% x 전체 픽셀) 로 정확히 맞추고,
    fraction mask 는 드론 마스크의 block_fraction 그대로입니다.

    Raises:
        GenerationError: 패치 수 / 크기로 목표 weed 비율을 만들 수 없을 때
    """
    spec = spec or FieldSpec()
    height, width = spec.drone_shape
    drone_transform = GeoTransform(spec.origin[0], spec.origin[1], spec.drone_pixel, spec.drone_pixel)
    n_weed = int(round(spec.target_weed_fraction / 100.0 * height * width))

    patches = sample_patches(spec)
    if n_weed > 0 and not patches:
        raise GenerationError(f"target_weed_fraction {spec.target_weed_fraction}% needs at least one weed patch")

    if patches:
        q = patch_distance(patches, drone_transform, height, width, threads)
        weed = _weed_mask(q, n_weed)
    else:
        weed = np.zeros((height, width), dtype=bool)

    drone_mask = GeoRaster(data=weed.astype(np.uint8), transform=drone_transform, crs=spec.crs, band_names=("weed",))
    fraction = block_fraction(drone_mask, spec.factor)
    fraction_values = fraction.band(0).astype(np.float64)

    satellite = GeoRaster(
        data=_satellite_bands(spec, fraction_values, threads),
        transform=fraction.transform,
        crs=spec.crs,
        band_names=BandSet.ROLES,
    )

    prediction = None
    if spec.prediction_snr is not None:
        prediction = fraction.with_data(
            noisy_prediction(fraction_values, spec.prediction_snr, spec.seed),
            band_names=("prediction",),
        )

    drone_prediction = None
    if spec.drone_prediction:
        base = 0.15 + 0.7 * weed.astype(np.float64)
        scores = noisy_prediction(base, spec.drone_prediction_snr, spec.seed, STREAM_DRONE_PREDICTION)
        drone_prediction = drone_mask.with_data(scores, band_names=("prediction",))

    logger.info(
        f"Generated {width}x{height} drone field with {len(patches)} patches, "
        f"{n_weed} weed pixels ({n_weed / (height * width):.2%}), satellite {fraction.width}x{fraction.height}"
    )
    return SyntheticField(
        spec=spec,
        drone_mask=drone_mask,
        fraction=fraction,
        satellite=satellite,
        prediction=prediction,
        drone_prediction=drone_prediction,
        patches=patches,
    )


def write_field(synthetic: SyntheticField, out_dir: PathLike) -> Dict[str, object]:
    """
    모든 래스터를 GRF 로, FieldSpec 과 요약을 JSON 으로 저장

    Returns:
        {"paths": {이름: 경로}, "area": AreaReport dict, ...}
    """
    out_dir = Path(out_dir)
    paths = {
        "drone_mask": write_raster(synthetic.drone_mask, out_dir / "drone_mask.grf"),
        "fraction": write_raster(synthetic.fraction, out_dir / "fraction.grf"),
        "satellite": write_raster(synthetic.satellite, out_dir / "satellite.grf"),
        "field_spec": write_json(synthetic.spec.model_dump(mode="json"), out_dir / "field_spec.json"),
    }
    if synthetic.prediction is not None:
        paths["prediction"] = write_raster(synthetic.prediction, out_dir / "prediction.grf")
    if synthetic.drone_prediction is not None:
        paths["drone_prediction"] = write_raster(synthetic.drone_prediction, out_dir / "drone_prediction.grf")

    summary = {
        "paths": {name: path.name for name, path in sorted(paths.items())},
        "area": area_report(synthetic.fraction).to_dict(),
        "drone_shape": list(synthetic.spec.drone_shape),
        "sat_shape": list(synthetic.spec.sat_shape),
        "patches": [p.to_dict() for p in synthetic.patches],
    }
    write_json(summary, out_dir / "field.json")
    return summary
