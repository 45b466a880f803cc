"""
Pydantic schemas for on-disk artifacts and configuration
"""
import re
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

GRF_DTYPES = ("u8", "f32")


class GrfHeader(BaseModel):
    """GRF JSON sidecar"""

    model_config = ConfigDict(extra="forbid")

    width: int = Field(gt=0)
    height: int = Field(gt=0)
    bands: int = Field(ge=1)
    dtype: Literal["u8", "f32"]
    transform: List[float] = Field(min_length=6, max_length=6)
    crs: str = ""
    nodata: Optional[float] = None
    band_names: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_band_names(self):
        if self.band_names and len(self.band_names) != self.bands:
            raise ValueError(f"band_names has {len(self.band_names)} entries for {self.bands} bands")
        return self

    @field_validator("transform")
    @classmethod
    def check_transform(cls, value: List[float]) -> List[float]:
        if value[2] != 0 or value[4] != 0:
            raise ValueError("rotation terms must be zero")
        if not (value[1] > 0 and value[5] < 0):
            raise ValueError("transform must have pixel_w > 0 and -pixel_h < 0")
        return value


class PngSidecar(BaseModel):
    """PNG 마스크용 JSON sidecar (transform만 보관)"""

    model_config = ConfigDict(extra="ignore")

    transform: List[float] = Field(min_length=6, max_length=6)
    crs: str = ""


class SpectralProfile(BaseModel):
    """밴드별 crop / weed 반사율 분포 (평균, 표준편차)"""

    model_config = ConfigDict(extra="forbid")

    crop_mean: float
    crop_std: float = Field(ge=0)
    weed_mean: float
    weed_std: float = Field(ge=0)


def _default_profiles() -> Dict[str, SpectralProfile]:
    # L2A 반사율 (0..1). vre2 / nir 에서 weed-crop 차이가 가장 크다
    table = {
        "blue": (0.040, 0.006, 0.043, 0.006),
        "green": (0.080, 0.008, 0.092, 0.008),
        "red": (0.050, 0.007, 0.055, 0.007),
        "nir": (0.300, 0.020, 0.420, 0.020),
        "vre1": (0.120, 0.010, 0.140, 0.010),
        "vre2": (0.220, 0.015, 0.340, 0.015),
        "vre3": (0.280, 0.018, 0.370, 0.018),
        "nnir": (0.310, 0.020, 0.400, 0.020),
        "swir1": (0.200, 0.015, 0.190, 0.015),
        "swir2": (0.110, 0.012, 0.100, 0.012),
    }
    return {
        role: SpectralProfile(crop_mean=cm, crop_std=cs, weed_mean=wm, weed_std=ws)
        for role, (cm, cs, wm, ws) in table.items()
    }


class FieldSpec(BaseModel):
    """합성 필드 생성 사양"""

    model_config = ConfigDict(extra="forbid")

    extent_m: Tuple[float, float] = (100.0, 100.0)
    drone_pixel: float = Field(default=0.05, gt=0)
    sat_pixel: float = Field(default=10.0, gt=0)
    origin: Tuple[float, float] = (500000.0, 4100000.0)
    crs: str = "EPSG:32611"
    weed_patch_count: int = Field(default=12, ge=0)
    patch_radius_mean: float = Field(default=3.0, gt=0)
    patch_radius_std: float = Field(default=1.0, ge=0)
    patch_aspect_max: float = Field(default=2.5, ge=1)
    target_weed_fraction: float = Field(default=4.85, ge=0, le=100)
    spectral_profiles: Dict[str, SpectralProfile] = Field(default_factory=_default_profiles)
    prediction_snr: Optional[float] = Field(default=4.0, gt=0)
    drone_prediction: bool = False
    drone_prediction_snr: float = Field(default=3.0, gt=0)
    seed: int = 0

    @property
    def factor(self) -> int:
        return int(round(self.sat_pixel / self.drone_pixel))

    @property
    def drone_shape(self) -> Tuple[int, int]:
        """(height, width)"""
        return (
            int(round(self.extent_m[1] / self.drone_pixel)),
            int(round(self.extent_m[0] / self.drone_pixel)),
        )

    @property
    def sat_shape(self) -> Tuple[int, int]:
        return (
            int(round(self.extent_m[1] / self.sat_pixel)),
            int(round(self.extent_m[0] / self.sat_pixel)),
        )

    @model_validator(mode="after")
    def check_grid(self):
        ratio = self.sat_pixel / self.drone_pixel
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(f"sat_pixel / drone_pixel must be an integer, got {ratio}")
        for extent in self.extent_m:
            if extent <= 0:
                raise ValueError("extent_m must be positive")
            cells = extent / self.sat_pixel
            if abs(cells - round(cells)) > 1e-9:
                raise ValueError(f"extent {extent} m is not a multiple of sat_pixel {self.sat_pixel} m")
        missing = [role for role in _default_profiles() if role not in self.spectral_profiles]
        if missing:
            raise ValueError(f"spectral_profiles missing roles: {missing}")
        return self


_SLUG_PATTERN = re.compile(r"[^A-Za-z0-9]+")


class ModelRecord(BaseModel):
    """외부에서 학습된 segmentation 모델의 registry 항목"""

    model_config = ConfigDict(extra="forbid")

    schema_version: int = 1
    architecture: str = Field(min_length=1)
    encoder: str = Field(min_length=1)
    loss: str = Field(min_length=1)
    # 공개 표 일부는 크기/속도 없이 excess 만 제공
    size_mb: Optional[float] = Field(default=None, gt=0)
    relative_speed: Optional[float] = Field(default=None, gt=0)
    excess: Dict[str, float] = Field(default_factory=dict)
    prediction_path: Optional[str] = None
    status: Literal["declared", "computed"] = "declared"

    @field_validator("excess")
    @classmethod
    def check_targets(cls, value: Dict[str, float]) -> Dict[str, float]:
        normalized = {}
        for key, excess in value.items():
            target = float(key)
            if not 0 < target <= 100:
                raise ValueError(f"excess target {key} outside (0, 100]")
            normalized[target_key(target)] = float(excess)
        return normalized

    @property
    def name(self) -> str:
        return f"{self.architecture}/{self.encoder}/{self.loss}"

    @property
    def slug(self) -> str:
        raw = f"{self.architecture}_{self.encoder}_{self.loss}".replace("+", "p")
        return _SLUG_PATTERN.sub("_", raw).strip("_").lower()

    def excess_at(self, target: float) -> Optional[float]:
        return self.excess.get(target_key(target))


def target_key(target: float) -> str:
    """커버리지 목표를 dict 키 문자열로 ("99", "97.5")"""
    target = float(target)
    return str(int(target)) if target == int(target) else repr(target)


class RunConfig(BaseModel):
    """CLI 실행 설정 (출력 디렉토리에 run_config.json으로 기록)"""

    model_config = ConfigDict(extra="forbid")

    subcommand: str
    inputs: Dict[str, Optional[str]] = Field(default_factory=dict)
    split_fractions: Tuple[float, float, float] = (0.45, 0.25, 0.30)
    targets: Tuple[float, ...] = (90.0, 95.0, 98.0, 99.0)
    seed: int = 0
    threads: int = Field(default=1, ge=1)
    output: Optional[str] = None
    r2_variant: Literal["determination", "pearson"] = "determination"
