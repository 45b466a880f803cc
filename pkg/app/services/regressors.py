"""
Native pixel regressors: k-NN, extremely randomized trees, ridge
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from app.utils.errors import FitError, ParameterError, SolverError
from app.utils.parallel import map_chunks
from app.utils.setting import resolve_seed

logger = logging.getLogger(__name__)

# k-NN 거리 계산 시 한 청크의 (query x train x feature) 원소 상한
KNN_CHUNK_ELEMENTS = 4_000_000


def as_features(X, n_features: Optional[int] = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ParameterError(f"Feature matrix must be 2-D, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise ParameterError(f"Expected {n_features} features, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ParameterError("Feature matrix contains non-finite values")
    return X


def as_targets(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != n_rows:
        raise ParameterError(f"Target length {y.shape[0]} does not match {n_rows} rows")
    if not np.isfinite(y).all():
        raise ParameterError("Targets contain non-finite values")
    return y


@dataclass
class Standardizer:
    """train 데이터로만 학습하는 컬럼별 z-score"""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(mean=mean, scale=scale)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, List[float]]) -> "Standardizer":
        return cls(mean=np.asarray(payload["mean"], dtype=np.float64), scale=np.asarray(payload["scale"], dtype=np.float64))


class Regressor(ABC):
    """
    픽셀 회귀 모델 공통 인터페이스.
    predict 결과는 항상 [0, 1]로 clamp.
    """

    kind: str = "regressor"

    def __init__(self):
        self.n_features: Optional[int] = None

    @property
    def is_fitted(self) -> bool:
        return self.n_features is not None

    def fit(self, X, y) -> "Regressor":
        X = as_features(X)
        if X.shape[0] == 0:
            raise FitError(f"{self.kind}: empty training set")
        y = as_targets(y, X.shape[0])
        self._fit(X, y)
        self.n_features = X.shape[1]
        logger.debug(f"Fitted {self!r} on {X.shape[0]} rows")
        return self

    def predict_raw(self, X) -> np.ndarray:
        if not self.is_fitted:
            raise FitError(f"{self.kind}: predict called before fit")
        X = as_features(X, self.n_features)
        return self._predict(X)

    def predict(self, X) -> np.ndarray:
        return np.clip(self.predict_raw(X), 0.0, 1.0)

    @abstractmethod
    def _fit(self, X: np.ndarray, y: np.ndarray) -> None:
        ...

    @abstractmethod
    def _predict(self, X: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def params(self) -> Dict[str, Any]:
        ...

    @abstractmethod
    def _state(self) -> Dict[str, Any]:
        ...

    @abstractmethod
    def _load_state(self, state: Dict[str, Any]) -> None:
        ...

    def to_dict(self) -> Dict[str, Any]:
        if not self.is_fitted:
            raise FitError(f"{self.kind}: cannot serialize an unfitted model")
        return {
            "kind": self.kind,
            "params": self.params(),
            "n_features": self.n_features,
            "state": self._state(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Regressor":
        model = cls(**payload["params"])
        model._load_state(payload["state"])
        model.n_features = int(payload["n_features"])
        return model

    def __repr__(self) -> str:
        params = ", ".join(f"{k}={v}" for k, v in self.params().items())
        return f"{type(self).__name__}({params})"


class KNNRegressor(Regressor):
    """
    k-최근접 이웃 회귀 (표준화된 유클리드 거리).
    거리 동률은 train 행 인덱스가 작은 쪽 우선.
    """

    kind = "knn"

    def __init__(self, k: int = 5, standardize: bool = True, threads: Optional[int] = None):
        super().__init__()
        if int(k) < 1:
            raise ParameterError(f"k must be >= 1, got {k}")
        self.k = int(k)
        self.standardize = bool(standardize)
        self.threads = threads
        self.scaler: Optional[Standardizer] = None
        self.X: Optional[np.ndarray] = None
        self.y: Optional[np.ndarray] = None

    def params(self) -> Dict[str, Any]:
        return {"k": self.k, "standardize": self.standardize}

    def _fit(self, X: np.ndarray, y: np.ndarray) -> None:
        if self.k > X.shape[0]:
            raise ParameterError(f"k={self.k} exceeds the {X.shape[0]} training rows")
        self.scaler = Standardizer.fit(X) if self.standardize else None
        self.X = self.scaler.transform(X) if self.scaler else X.copy()
        self.y = y.copy()

    def _predict(self, X: np.ndarray) -> np.ndarray:
        Q = self.scaler.transform(X) if self.scaler else X
        n_train, n_feat = self.X.shape
        chunk = max(1, KNN_CHUNK_ELEMENTS // max(1, n_train * n_feat))

        def run(start: int, stop: int) -> np.ndarray:
            diff = Q[start:stop, None, :] - self.X[None, :, :]
            dist = np.einsum("qtf,qtf->qt", diff, diff)
            nearest = np.argsort(dist, axis=1, kind="stable")[:, :self.k]
            return self.y[nearest].mean(axis=1)

        parts = map_chunks(run, Q.shape[0], chunk, self.threads)
        return np.concatenate(parts) if parts else np.empty(0)

    def _state(self) -> Dict[str, Any]:
        return {
            "scaler": self.scaler.to_dict() if self.scaler else None,
            "X": self.X.tolist(),
            "y": self.y.tolist(),
        }

    def _load_state(self, state: Dict[str, Any]) -> None:
        self.scaler = Standardizer.from_dict(state["scaler"]) if state["scaler"] else None
        self.X = np.asarray(state["X"], dtype=np.float64)
        self.y = np.asarray(state["y"], dtype=np.float64)


@dataclass
class Tree:
    """배열 기반 회귀 트리. feature == -1 이면 leaf"""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feature = self.feature[node]
            internal = feature >= 0
            if not internal.any():
                break
            idx = rows[internal]
            n = node[internal]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[internal] = np.where(go_left, self.left[n], self.right[n])
        return self.value[node]

    def to_dict(self) -> Dict[str, list]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, list]) -> "Tree":
        return cls(
            feature=np.asarray(payload["feature"], dtype=np.int64),
            threshold=np.asarray(payload["threshold"], dtype=np.float64),
            left=np.asarray(payload["left"], dtype=np.int64),
            right=np.asarray(payload["right"], dtype=np.int64),
            value=np.asarray(payload["value"], dtype=np.float64),
        )


def _child_sse(y: np.ndarray, mask: np.ndarray) -> float:
    left = y[mask]
    right = y[~mask]
    return float(((left - left.mean()) ** 2).sum() + ((right - right.mean()) ** 2).sum())


def build_extra_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    max_depth: int,
    min_leaf: int,
) -> Tree:
    """
    Extremely randomized tree 한 그루.
    각 노드에서 피처마다 (min, max) 구간의 균등 난수 임계값을 하나씩 뽑고
    자식 SSE가 가장 작은 후보로 분할 (동률은 낮은 피처 인덱스).
    """
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []

    def new_node(idx: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(value) - 1

    stack = [(new_node(np.arange(X.shape[0])), np.arange(X.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yi = y[idx]
        if depth >= max_depth or idx.size < 2 * min_leaf or np.ptp(yi) == 0:
            continue

        best = None
        for f in range(X.shape[1]):
            column = X[idx, f]
            lo, hi = column.min(), column.max()
            if hi <= lo:
                continue
            thr = float(rng.uniform(lo, hi))
            mask = column <= thr
            n_left = int(mask.sum())
            if n_left < min_leaf or idx.size - n_left < min_leaf:
                continue
            sse = _child_sse(yi, mask)
            if best is None or sse < best[0]:
                best = (sse, f, thr, mask)

        if best is None:
            continue

        _, f, thr, mask = best
        left_idx, right_idx = idx[mask], idx[~mask]
        feature[node] = f
        threshold[node] = thr
        left[node] = new_node(left_idx)
        right[node] = new_node(right_idx)
        stack.append((right[node], right_idx, depth + 1))
        stack.append((left[node], left_idx, depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )


class ExtraTreesRegressor(Regressor):
    """
    Extremely randomized trees 앙상블 (원시 피처 사용, 표준화 없음).
    트리별 seed는 SeedSequence.spawn 으로 파생되므로 스레드 수와 무관하게 동일한 모델.
    """

    kind = "extra_trees"

    def __init__(
        self,
        n_trees: int = 50,
        max_depth: int = 8,
        min_leaf: int = 2,
        seed: Optional[int] = None,
        threads: Optional[int] = None,
    ):
        super().__init__()
        if int(n_trees) < 1:
            raise ParameterError(f"n_trees must be >= 1, got {n_trees}")
        if int(max_depth) < 0 or int(min_leaf) < 1:
            raise ParameterError("max_depth must be >= 0 and min_leaf >= 1")
        self.n_trees = int(n_trees)
        self.max_depth = int(max_depth)
        self.min_leaf = int(min_leaf)
        self.seed = resolve_seed(seed)
        self.threads = threads
        self.trees: List[Tree] = []

    def params(self) -> Dict[str, Any]:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "seed": self.seed,
        }

    def _fit(self, X: np.ndarray, y: np.ndarray) -> None:
        children = np.random.SeedSequence(self.seed).spawn(self.n_trees)

        def run(start: int, stop: int) -> List[Tree]:
            return [
                build_extra_tree(X, y, np.random.default_rng(children[i]), self.max_depth, self.min_leaf)
                for i in range(start, stop)
            ]

        self.trees = [tree for part in map_chunks(run, self.n_trees, 1, self.threads) for tree in part]

    def _predict(self, X: np.ndarray) -> np.ndarray:
        total = np.zeros(X.shape[0], dtype=np.float64)
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)

    def _state(self) -> Dict[str, Any]:
        return {"trees": [tree.to_dict() for tree in self.trees]}

    def _load_state(self, state: Dict[str, Any]) -> None:
        self.trees = [Tree.from_dict(t) for t in state["trees"]]


class RidgeRegressor(Regressor):
    """
    L2 정규화 선형 회귀 (intercept 비정규화).
    표준화된 피처에서 정규방정식을 Cholesky로 푼다.
    """

    kind = "ridge"

    def __init__(self, ridge_lambda: float = 1.0):
        super().__init__()
        if float(ridge_lambda) < 0:
            raise ParameterError(f"ridge_lambda must be >= 0, got {ridge_lambda}")
        self.ridge_lambda = float(ridge_lambda)
        self.scaler: Optional[Standardizer] = None
        self.coef: Optional[np.ndarray] = None
        self.intercept: float = 0.0

    def params(self) -> Dict[str, Any]:
        return {"ridge_lambda": self.ridge_lambda}

    def _fit(self, X: np.ndarray, y: np.ndarray) -> None:
        self.scaler = Standardizer.fit(X)
        Xs = self.scaler.transform(X)
        y_mean = float(y.mean())
        p = Xs.shape[1]

        if self.ridge_lambda == 0 and np.linalg.matrix_rank(Xs) < p:
            raise SolverError("Normal equations are rank deficient with ridge_lambda=0; use ridge_lambda > 0")

        gram = Xs.T @ Xs + self.ridge_lambda * np.eye(p)
        rhs = Xs.T @ (y - y_mean)
        try:
            factor = cho_factor(gram, lower=True)
            self.coef = cho_solve(factor, rhs)
        except LinAlgError as e:
            raise SolverError(f"Cholesky solve failed ({e}); use ridge_lambda > 0") from None
        self.intercept = y_mean

    def _predict(self, X: np.ndarray) -> np.ndarray:
        return self.scaler.transform(X) @ self.coef + self.intercept

    def coefficients(self):
        """원래 피처 단위의 (coef, intercept)"""
        coef = self.coef / self.scaler.scale
        intercept = self.intercept - float(coef @ self.scaler.mean)
        return coef, intercept

    def _state(self) -> Dict[str, Any]:
        return {"scaler": self.scaler.to_dict(), "coef": self.coef.tolist(), "intercept": self.intercept}

    def _load_state(self, state: Dict[str, Any]) -> None:
        self.scaler = Standardizer.from_dict(state["scaler"])
        self.coef = np.asarray(state["coef"], dtype=np.float64)
        self.intercept = float(state["intercept"])


REGRESSORS = {cls.kind: cls for cls in (KNNRegressor, ExtraTreesRegressor, RidgeRegressor)}


def fit_knn(X, y, k: int = 5, threads: Optional[int] = None) -> KNNRegressor:
    return KNNRegressor(k=k, threads=threads).fit(X, y)


def fit_random_tree_ensemble(
    X, y, n_trees: int = 50, max_depth: int = 8, min_leaf: int = 2,
    seed: Optional[int] = None, threads: Optional[int] = None,
) -> ExtraTreesRegressor:
    return ExtraTreesRegressor(
        n_trees=n_trees, max_depth=max_depth, min_leaf=min_leaf, seed=seed, threads=threads
    ).fit(X, y)


def fit_linear(X, y, ridge_lambda: float = 1.0) -> RidgeRegressor:
    return RidgeRegressor(ridge_lambda=ridge_lambda).fit(X, y)
