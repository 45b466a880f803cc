"""
Voting ensemble, regression metrics, weight optimization and subset search
"""
import itertools
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.services.raster_io import read_json, write_json
from app.services.regressors import (
    REGRESSORS,
    ExtraTreesRegressor,
    KNNRegressor,
    Regressor,
    RidgeRegressor,
    as_features,
)
from app.utils.errors import MetricsError, ParameterError, SchemaError, SmallHeldoutWarning
from app.utils.setting import get_config, resolve_seed

logger = logging.getLogger(__name__)

R2_VARIANTS = ("determination", "pearson")

# 전체 simplex 그리드 열거 상한 (초과 시 pairwise hill-climb)
MAX_GRID_POINTS = 200_000
MIN_HELDOUT_ROWS = 10
# 개선으로 인정하는 최소 R² 증가량
IMPROVEMENT_TOL = 1e-12


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mae: float
    r2: float
    r2_variant: str = "determination"
    n: int = 0

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _check_variant(variant: Optional[str]) -> str:
    variant = variant or get_config().R2_VARIANT
    if variant not in R2_VARIANTS:
        raise ParameterError(f"Unknown r2 variant '{variant}', expected one of {R2_VARIANTS}")
    return variant


def r2_score(pred: np.ndarray, truth: np.ndarray, variant: str = "determination") -> float:
    """
    determination: 1 - SSE/SST
    pearson: 상관계수 제곱 (예측이 상수면 0)
    """
    truth_c = truth - truth.mean()
    sst = float(truth_c @ truth_c)
    if sst == 0:
        raise MetricsError("R² is undefined for constant truth")
    if variant == "determination":
        resid = pred - truth
        return 1.0 - float(resid @ resid) / sst
    pred_c = pred - pred.mean()
    spp = float(pred_c @ pred_c)
    if spp == 0:
        return 0.0
    return float(pred_c @ truth_c) ** 2 / (spp * sst)


def metrics(pred, truth, r2_variant: Optional[str] = None) -> MetricsReport:
    """
    RMSE, MAE, R²

    Args:
        pred: 예측값
        truth: 실제값
        r2_variant: "determination" (기본) 또는 "pearson"
    """
    variant = _check_variant(r2_variant)
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise MetricsError(f"Length mismatch: {pred.size} predictions vs {truth.size} truths")
    if pred.size < 2:
        raise MetricsError("metrics need at least 2 samples")

    resid = pred - truth
    rmse = math.sqrt(float(np.mean(resid ** 2)))
    mae = float(np.mean(np.abs(resid)))
    return MetricsReport(rmse=rmse, mae=mae, r2=r2_score(pred, truth, variant), r2_variant=variant, n=int(pred.size))


class VotingEnsemble:
    """멤버 예측의 볼록 가중 평균"""

    def __init__(self, members: Sequence[Regressor], weights: Sequence[float], names: Optional[Sequence[str]] = None):
        self.members = list(members)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.names = list(names) if names is not None else [f"m{i}" for i in range(len(self.members))]

    @property
    def kind(self) -> str:
        return "voting"

    def member_predictions(self, X) -> np.ndarray:
        """(members, rows)"""
        X = as_features(X)
        return np.vstack([member.predict(X) for member in self.members])

    def predict(self, X) -> np.ndarray:
        return self.weights @ self.member_predictions(X)

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "names": self.names,
            "weights": self.weights.tolist(),
            "members": [member.to_dict() for member in self.members],
        }

    def __repr__(self) -> str:
        parts = ", ".join(f"{n}={w:.4f}" for n, w in zip(self.names, self.weights))
        return f"VotingEnsemble({parts})"


def check_weights(weights: Sequence[float], n_members: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.size != n_members:
        raise ParameterError(f"{weights.size} weights for {n_members} members")
    if (weights < 0).any() or not np.isfinite(weights).all():
        raise ParameterError("Ensemble weights must be finite and non-negative")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ParameterError(f"Ensemble weights must sum to 1, got {weights.sum()}")
    return weights


def ensemble(
    members: Sequence[Regressor],
    weights: Optional[Sequence[float]] = None,
    names: Optional[Sequence[str]] = None,
) -> VotingEnsemble:
    """weights 생략 시 균등 가중치"""
    if not members:
        raise ParameterError("An ensemble needs at least one member")
    if weights is None:
        weights = np.full(len(members), 1.0 / len(members))
    return VotingEnsemble(members, check_weights(weights, len(members)), names)


def _simplex_grid(m: int, steps: int) -> np.ndarray:
    """합이 steps인 m개 음이 아닌 정수 조합 전체 (stars and bars)"""
    rows = []
    for bars in itertools.combinations(range(steps + m - 1), m - 1):
        edges = (-1,) + bars + (steps + m - 1,)
        rows.append([edges[i + 1] - edges[i] - 1 for i in range(m)])
    return np.asarray(rows, dtype=np.float64)


def _r2_batch(W: np.ndarray, P: np.ndarray, y: np.ndarray, variant: str) -> np.ndarray:
    """가중치 행렬 W (K, m) 각각의 R²"""
    preds = W @ P
    y_c = y - y.mean()
    sst = float(y_c @ y_c)
    if variant == "determination":
        resid = preds - y
        return 1.0 - np.einsum("kn,kn->k", resid, resid) / sst
    pred_c = preds - preds.mean(axis=1, keepdims=True)
    spp = np.einsum("kn,kn->k", pred_c, pred_c)
    cov = pred_c @ y_c
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(spp > 0, cov ** 2 / (spp * sst), 0.0)
    return r2


def _grid_search(P: np.ndarray, y: np.ndarray, steps: int, variant: str) -> Tuple[np.ndarray, float]:
    m = P.shape[0]
    grid = _simplex_grid(m, steps) / steps
    batch = max(1, 20_000_000 // max(1, P.shape[1]))
    best_w, best_r2 = None, -np.inf
    for start in range(0, grid.shape[0], batch):
        W = grid[start:start + batch]
        scores = _r2_batch(W, P, y, variant)
        i = int(np.argmax(scores))
        if scores[i] > best_r2:
            best_w, best_r2 = W[i].copy(), float(scores[i])
    return best_w, best_r2


def _pairwise_climb(P, y, weights, best_r2, step, variant, max_rounds=1000) -> Tuple[np.ndarray, float]:
    """한 멤버에서 다른 멤버로 step 만큼 가중치를 옮기며 개선되는 동안 반복"""
    m = P.shape[0]
    weights = weights.copy()
    for _ in range(max_rounds):
        improved = False
        for i, j in itertools.permutations(range(m), 2):
            delta = min(step, weights[j])
            if delta <= 0:
                continue
            candidate = weights.copy()
            candidate[i] += delta
            candidate[j] -= delta
            score = float(_r2_batch(candidate[None, :], P, y, variant)[0])
            if score > best_r2 + IMPROVEMENT_TOL:
                weights, best_r2, improved = candidate, score, True
        if not improved:
            break
    return weights, best_r2


def optimize_weights_from_predictions(
    P,
    y,
    step: Optional[float] = None,
    r2_variant: Optional[str] = None,
) -> Tuple[np.ndarray, float]:
    """
    held-out 예측 행렬 P (members, rows)에서 R²를 최대화하는 simplex 가중치.

    1) 균등 가중치를 기준점으로 두고
    2) 해상도 step 그리드 전체 탐색 (점이 너무 많으면 pairwise hill-climb)
    3) step/2, step/4, ... 로 pairwise 국소 개선
    개선이 IMPROVEMENT_TOL 을 넘을 때만 이동하므로 동률이면 균등 가중치를 반환.

    Returns:
        (weights, heldout R²)
    """
    variant = _check_variant(r2_variant)
    step = step or get_config().ENSEMBLE_GRID_STEP
    P = np.asarray(P, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if P.ndim != 2 or P.shape[0] < 2:
        raise ParameterError("optimize_weights needs at least 2 members")
    if P.shape[1] == 0 or P.shape[1] != y.size:
        raise ParameterError("held-out predictions and targets must be non-empty and aligned")
    if y.size < MIN_HELDOUT_ROWS:
        message = f"Held-out set has only {y.size} rows (< {MIN_HELDOUT_ROWS}); weights may be unreliable"
        logger.warning(message)
        warnings.warn(message, SmallHeldoutWarning, stacklevel=2)
    if np.ptp(y) == 0:
        raise MetricsError("R² is undefined for constant held-out truth")

    m = P.shape[0]
    uniform = np.full(m, 1.0 / m)
    best_w = uniform
    best_r2 = float(_r2_batch(uniform[None, :], P, y, variant)[0])
    uniform_r2 = best_r2

    steps = int(round(1.0 / step))
    if math.comb(steps + m - 1, m - 1) <= MAX_GRID_POINTS:
        grid_w, grid_r2 = _grid_search(P, y, steps, variant)
        if grid_r2 > best_r2 + IMPROVEMENT_TOL:
            best_w, best_r2 = grid_w, grid_r2
    else:
        best_w, best_r2 = _pairwise_climb(P, y, best_w, best_r2, step, variant)

    refine = step / 2
    while refine >= 1e-4:
        best_w, best_r2 = _pairwise_climb(P, y, best_w, best_r2, refine, variant)
        refine /= 2

    best_w = np.clip(best_w, 0.0, None)
    best_w = best_w / best_w.sum()
    logger.info(f"Optimized weights {np.round(best_w, 4).tolist()}: R² {uniform_r2:.4f} (uniform) -> {best_r2:.4f}")
    return best_w, best_r2


def optimize_weights(
    members: Sequence[Regressor],
    X_heldout,
    y_heldout,
    step: Optional[float] = None,
    r2_variant: Optional[str] = None,
) -> np.ndarray:
    """fit 된 멤버들의 held-out R²를 최대화하는 가중치"""
    if len(members) < 2:
        raise ParameterError("optimize_weights needs at least 2 members")
    X = as_features(X_heldout)
    P = np.vstack([member.predict(X) for member in members])
    weights, _ = optimize_weights_from_predictions(P, y_heldout, step=step, r2_variant=r2_variant)
    return weights


@dataclass
class SubsetSearchResult:
    names: Tuple[str, ...]
    ensemble: VotingEnsemble
    r2: float
    evaluations: List[Tuple[Tuple[str, ...], float]] = field(default_factory=list)
    skipped: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "members": list(self.names),
            "r2": self.r2,
            "evaluations": len(self.evaluations),
            "skipped": self.skipped,
        }


def subset_search(
    candidates: Mapping[str, Regressor],
    X_heldout,
    y_heldout,
    size: Optional[int] = None,
    r2_variant: Optional[str] = None,
) -> SubsetSearchResult:
    """
    크기 size 의 모든 후보 부분집합을 균등 가중 앙상블로 held-out R² 평가하고 최대값을 반환.
    후보 이름 사전순으로 열거하며 동률이면 먼저 나온 부분집합 유지.
    예측에 실패한 후보는 건너뛰고 skipped 에 기록.
    """
    variant = _check_variant(r2_variant)
    size = int(size or get_config().ENSEMBLE_SUBSET_SIZE)
    X = as_features(X_heldout)
    y = np.asarray(y_heldout, dtype=np.float64).reshape(-1)
    if size < 1:
        raise ParameterError(f"subset size must be >= 1, got {size}")
    if len(candidates) < size:
        raise ParameterError(f"{len(candidates)} candidates cannot form subsets of size {size}")

    predictions: Dict[str, np.ndarray] = {}
    skipped: Dict[str, str] = {}
    for name in sorted(candidates):
        try:
            predictions[name] = candidates[name].predict(X)
        except Exception as e:
            logger.warning(f"Skipping candidate {name}: {e}")
            skipped[name] = str(e)

    names = sorted(predictions)
    if len(names) < size:
        raise ParameterError(f"Only {len(names)} usable candidates for subsets of size {size}")

    best_names, best_r2 = None, -np.inf
    evaluations = []
    for subset in itertools.combinations(names, size):
        pred = np.mean([predictions[n] for n in subset], axis=0)
        score = r2_score(pred, y, variant)
        evaluations.append((subset, score))
        logger.info(f"Subset {'+'.join(subset)}: R² = {score:.4f}")
        if score > best_r2:
            best_names, best_r2 = subset, score

    logger.info(f"Evaluated {len(evaluations)} subsets, best {'+'.join(best_names)} (R² {best_r2:.4f})")
    best = ensemble([candidates[n] for n in best_names], names=best_names)
    return SubsetSearchResult(
        names=best_names, ensemble=best, r2=best_r2, evaluations=evaluations, skipped=skipped
    )


def default_candidates(seed: Optional[int] = None, threads: Optional[int] = None) -> Dict[str, Callable[[], Regressor]]:
    """subset search 용 기본 후보 모델 (이름 -> 생성 함수)"""
    seed = resolve_seed(seed)
    return {
        "knn_k5": lambda: KNNRegressor(k=5, threads=threads),
        "knn_k10": lambda: KNNRegressor(k=10, threads=threads),
        "knn_k20": lambda: KNNRegressor(k=20, threads=threads),
        "extra_trees_d4": lambda: ExtraTreesRegressor(n_trees=50, max_depth=4, min_leaf=2, seed=seed, threads=threads),
        "extra_trees_d8": lambda: ExtraTreesRegressor(n_trees=50, max_depth=8, min_leaf=2, seed=seed + 1, threads=threads),
        "extra_trees_d12": lambda: ExtraTreesRegressor(n_trees=100, max_depth=12, min_leaf=1, seed=seed + 2, threads=threads),
        "ridge_l0.1": lambda: RidgeRegressor(ridge_lambda=0.1),
        "ridge_l1": lambda: RidgeRegressor(ridge_lambda=1.0),
        "ridge_l10": lambda: RidgeRegressor(ridge_lambda=10.0),
        "ridge_l100": lambda: RidgeRegressor(ridge_lambda=100.0),
    }


def fit_candidates(
    factories: Mapping[str, Callable[[], Regressor]],
    X_train,
    y_train,
) -> Tuple[Dict[str, Regressor], Dict[str, str]]:
    """후보를 모두 학습. 실패한 후보는 건너뛰고 (이름 -> 에러 메시지) 로 보고"""
    fitted: Dict[str, Regressor] = {}
    failures: Dict[str, str] = {}
    for name in sorted(factories):
        try:
            fitted[name] = factories[name]().fit(X_train, y_train)
        except Exception as e:
            logger.warning(f"Candidate {name} failed to fit: {e}")
            failures[name] = str(e)
    logger.info(f"Fitted {len(fitted)} candidates ({len(failures)} failed)")
    return fitted, failures


def rank_by_r2(
    models: Mapping[str, object],
    X,
    y,
    r2_variant: Optional[str] = None,
    top: Optional[int] = None,
) -> List[Tuple[str, MetricsReport]]:
    """모델별 지표를 R² 내림차순 (동률은 이름순) 으로"""
    rows = [(name, metrics(model.predict(X), y, r2_variant)) for name, model in models.items()]
    rows.sort(key=lambda row: (-row[1].r2, row[0]))
    return rows[:top] if top else rows


def render_metrics_table(rows: Sequence[Tuple[str, MetricsReport]]) -> str:
    """Model / RMSE / MAE / R² 정렬 텍스트 표"""
    frame = pd.DataFrame(
        [
            {"Model": name, "RMSE": f"{report.rmse:.4f}", "MAE": f"{report.mae:.4f}", "R²": f"{report.r2:.4f}"}
            for name, report in rows
        ],
        columns=["Model", "RMSE", "MAE", "R²"],
    )
    return frame.to_string(index=False)


MODEL_FORMAT = "spraygrid-model"
MODEL_FORMAT_VERSION = 1


def model_to_dict(model) -> Dict:
    return {"format": MODEL_FORMAT, "version": MODEL_FORMAT_VERSION, "model": model.to_dict()}


def model_from_dict(payload: Dict):
    """
    버전 envelope 를 검증하고 모델 복원 (트리는 JSON 안에 inline)

    Raises:
        SchemaError: 형식 / 버전 / kind 가 맞지 않을 때
    """
    if not isinstance(payload, dict) or payload.get("format") != MODEL_FORMAT:
        raise SchemaError(f"Not a {MODEL_FORMAT} document")
    if payload.get("version") != MODEL_FORMAT_VERSION:
        raise SchemaError(f"Unsupported model version {payload.get('version')}, expected {MODEL_FORMAT_VERSION}")
    return _load_model_body(payload.get("model") or {})


def _load_model_body(body: Dict):
    kind = body.get("kind")
    try:
        if kind == "voting":
            members = [_load_model_body(member) for member in body["members"]]
            return VotingEnsemble(members, check_weights(body["weights"], len(members)), body["names"])
        if kind in REGRESSORS:
            return REGRESSORS[kind].from_dict(body)
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"Malformed {kind} model: {e}") from None
    raise SchemaError(f"Unknown model kind '{kind}'")


def save_model(model, path) -> Path:
    path = write_json(model_to_dict(model), path)
    logger.info(f"Saved {model!r} to {path}")
    return path


def load_model(path):
    return model_from_dict(read_json(path))
