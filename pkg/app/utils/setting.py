import os
from dataclasses import dataclass, field
from functools import cache
from typing import Optional, Tuple

from dotenv import load_dotenv

# 작업 디렉토리의 .env 파일을 환경변수로 로드 (이미 설정된 값은 유지)
load_dotenv(override=False)

SERVICE = "spraygrid"  # 서비스 이름


def _env_tuple(name: str, default: str, cast=float) -> tuple:
    """쉼표로 구분된 환경변수를 튜플로 변환"""
    raw = os.getenv(name, default)
    return tuple(cast(part.strip()) for part in raw.split(",") if part.strip())


@dataclass
class BaseConfig:
    ENVIRONMENT: str = os.getenv("ENVIRONMENT", "DEV")

    # 재현성 (seed 미지정 시 SPRAYGRID_SEED 사용)
    SEED: int = int(os.getenv("SPRAYGRID_SEED", "0"))
    THREADS: int = int(os.getenv("SPRAYGRID_THREADS", "1"))

    # 데이터 분할 (train / held-out / test)
    SPLIT_FRACTIONS: Tuple[float, float, float] = field(
        default_factory=lambda: _env_tuple("SPRAYGRID_SPLIT", "0.45,0.25,0.30")
    )
    # 공간 블록 크기 - 기본값은 Sentinel-2 픽셀 하나 (10m)
    SPLIT_BLOCK_METERS: float = float(os.getenv("SPRAYGRID_SPLIT_BLOCK_METERS", "10.0"))

    # 살포 계획 커버리지 목표 (%)
    TARGETS: Tuple[float, ...] = field(
        default_factory=lambda: _env_tuple("SPRAYGRID_TARGETS", "90,95,98,99")
    )

    # 드론 5cm -> 위성 10m
    SOFTMASK_FACTOR: int = int(os.getenv("SPRAYGRID_SOFTMASK_FACTOR", "200"))

    # "determination" 또는 "pearson"
    R2_VARIANT: str = os.getenv("SPRAYGRID_R2_VARIANT", "determination")

    # False color composite 설정
    STRETCH_PERCENTILES: Tuple[float, float] = (2.0, 98.0)
    COMPOSITE_MAPPING: Tuple[str, str, str] = ("nir", "green", "vre2")

    # 디코딩된 래스터 LRU 캐시 크기
    RASTER_CACHE_SIZE: int = int(os.getenv("SPRAYGRID_RASTER_CACHE_SIZE", "16"))

    # Model registry
    REGISTRY_SCHEMA_VERSION: int = 1
    INTEGRITY_TOLERANCE: float = 0.01

    # 앙상블 가중치 그리드 해상도
    ENSEMBLE_GRID_STEP: float = 0.01
    ENSEMBLE_SUBSET_SIZE: int = 3


@dataclass
class ProductionConfig(BaseConfig):
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "WARNING")


@dataclass
class DevelopmentConfig(BaseConfig):
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")


@dataclass
class TestConfig(BaseConfig):
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "DEBUG")


@cache
def get_config():
    env = BaseConfig().ENVIRONMENT.upper()
    if env == "PROD":
        return ProductionConfig()
    elif env == "DEV":
        return DevelopmentConfig()
    else:
        return TestConfig()


def resolve_seed(seed: Optional[int] = None) -> int:
    """
    명시적 seed가 없으면 설정(SPRAYGRID_SEED)의 값을 사용합니다.
    """
    if seed is not None:
        return int(seed)
    return get_config().SEED


def resolve_threads(threads: Optional[int] = None) -> int:
    """병렬 처리 스레드 수 (최소 1)"""
    if threads is None:
        threads = get_config().THREADS
    return max(1, int(threads))
