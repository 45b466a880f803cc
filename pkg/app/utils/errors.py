"""
SprayGrid exception hierarchy
각 예외는 CLI 종료 코드와 에러 코드 문자열을 가진다.
"""
from typing import Any, Dict


class SprayGridError(Exception):
    """모든 도메인 예외의 기반 클래스"""

    code = "SprayGridError"
    exit_code = 1

    def __init__(self, message: str):
        Exception.__init__(self, message)
        self.message = message

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": {
                "code": self.code,
                "message": self.message,
                "exit_code": self.exit_code,
            }
        }


class ParameterError(SprayGridError):
    code = "ParameterError"
    exit_code = 5


class DataValidationError(SprayGridError):
    code = "DataValidationError"
    exit_code = 3


class SchemaError(SprayGridError):
    code = "SchemaError"
    exit_code = 3


class AlignmentError(SprayGridError):
    code = "AlignmentError"
    exit_code = 4


class CoverageError(AlignmentError):
    code = "CoverageError"

    def __init__(self, uncovered_fraction: float):
        AlignmentError.__init__(
            self,
            f"Source raster does not cover the reference grid: {uncovered_fraction:.2%} uncovered",
        )
        self.uncovered_fraction = uncovered_fraction


class FitError(SprayGridError):
    code = "FitError"
    exit_code = 6


class SolverError(FitError):
    code = "SolverError"


class MetricsError(SprayGridError):
    code = "MetricsError"
    exit_code = 6


class UndefinedCoverageError(SprayGridError):
    code = "UndefinedCoverageError"
    exit_code = 6

    def __init__(self):
        SprayGridError.__init__(self, "Truth raster has zero weed area; coverage is undefined")


class InfeasibleTargetError(SprayGridError):
    code = "InfeasibleTargetError"
    exit_code = 6

    def __init__(self, target: float, max_coverage: float):
        SprayGridError.__init__(
            self,
            f"Coverage target {target}% is unreachable; at most {max_coverage:.4f}% of the weed "
            f"lies on pixels with a prediction",
        )
        self.target = target
        self.max_coverage = max_coverage


class GenerationError(SprayGridError):
    code = "GenerationError"
    exit_code = 6


class IntegrityError(SprayGridError):
    code = "IntegrityError"
    exit_code = 7


class RasterFormatError(SprayGridError):
    code = "RasterFormatError"
    exit_code = 8


class SmallHeldoutWarning(UserWarning):
    """held-out 데이터가 너무 작을 때 발생하는 경고"""


EXIT_CODES = {
    "ok": 0,
    "unexpected": SprayGridError.exit_code,
    "usage": 2,
    "schema": SchemaError.exit_code,
    "alignment": AlignmentError.exit_code,
    "parameter": ParameterError.exit_code,
    "computation": FitError.exit_code,
    "integrity": IntegrityError.exit_code,
    "io": RasterFormatError.exit_code,
}
