"""
Shared helpers for CLI subcommands
"""
import argparse
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from app.models.raster import GeoRaster
from app.models.schemas import RunConfig
from app.services.raster_io import read_raster, write_json
from app.services.softmask_service import SPLIT_NAMES
from app.utils.errors import ParameterError
from app.utils.setting import get_config, resolve_seed, resolve_threads

logger = logging.getLogger(__name__)

RUN_LOG = "run.log"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@dataclass
class CommandResult:
    """summary 는 stdout 마지막 줄 JSON, tables 는 그 앞에 출력하는 사람용 표"""

    summary: Dict
    tables: List[str] = field(default_factory=list)


def float_list(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def add_common_arguments(parser: argparse.ArgumentParser, out_required: bool = False) -> None:
    parser.add_argument("--out", required=out_required, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="random seed (default: $SPRAYGRID_SEED)")
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads")


def add_split_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--split",
        type=float_list,
        default=None,
        help="train,heldout,test fractions (default 0.45,0.25,0.30)",
    )


def add_targets_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--target",
        dest="targets",
        type=float,
        action="append",
        default=None,
        help="coverage target in percent; repeat for a sweep (default 90,95,98,99)",
    )


def add_r2_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--r2-variant",
        choices=("determination", "pearson"),
        default=None,
        help="R² definition (default: coefficient of determination)",
    )


def run_config(args: argparse.Namespace, inputs: Dict[str, Optional[str]]) -> RunConfig:
    """CLI 인자 > 설정 > 기본값 순으로 RunConfig 구성"""
    config = get_config()
    split = getattr(args, "split", None) or config.SPLIT_FRACTIONS
    if len(split) != 3:
        raise ParameterError(f"--split needs 3 fractions, got {split}")
    try:
        return RunConfig(
            subcommand=args.command,
            inputs={k: (str(v) if v is not None else None) for k, v in sorted(inputs.items())},
            split_fractions=tuple(split),
            targets=tuple(getattr(args, "targets", None) or config.TARGETS),
            seed=resolve_seed(getattr(args, "seed", None)),
            threads=resolve_threads(getattr(args, "threads", None)),
            output=getattr(args, "out", None),
            r2_variant=getattr(args, "r2_variant", None) or config.R2_VARIANT,
        )
    except ValidationError as e:
        raise ParameterError(f"Invalid run configuration: {e}") from None


def prepare_output(run: RunConfig) -> Optional[Path]:
    """출력 디렉토리 생성, run.log 핸들러 부착, run_config.json 기록"""
    if run.output is None:
        return None
    out = Path(run.output)
    out.mkdir(parents=True, exist_ok=True)

    handler = logging.FileHandler(out / RUN_LOG, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)

    write_json(run.model_dump(mode="json"), out / "run_config.json")
    return out


def load_raster(path: Optional[str], what: str) -> GeoRaster:
    if path is None:
        raise ParameterError(f"--{what} is required")
    return read_raster(path)


def load_labels(path: Optional[str]) -> Optional[np.ndarray]:
    """split 라벨 래스터 (softmask 출력 labels.grf)"""
    if path is None:
        return None
    labels = read_raster(path)
    return labels.band(0)


def check_split(name: str) -> str:
    if name not in SPLIT_NAMES:
        raise ParameterError(f"Unknown split '{name}', expected one of {list(SPLIT_NAMES)}")
    return name


def emit(result: CommandResult, stream) -> None:
    for table in result.tables:
        stream.write(table.rstrip("\n") + "\n\n")
    stream.write(json.dumps(result.summary, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")
    stream.flush()


def names_relative(paths: Dict[str, object], out: Path) -> Dict[str, str]:
    """요약 JSON 에는 출력 디렉토리 기준 상대 경로만 기록"""
    return {name: Path(path).relative_to(out).as_posix() for name, path in sorted(paths.items())}


def target_list(targets: Optional[Sequence[float]]) -> List[float]:
    return sorted(float(t) for t in (targets or get_config().TARGETS))
