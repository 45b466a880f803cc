import math

import numpy as np
import pytest

from app.services.ensemble_service import (
    VotingEnsemble,
    default_candidates,
    ensemble,
    fit_candidates,
    load_model,
    metrics,
    model_from_dict,
    optimize_weights,
    optimize_weights_from_predictions,
    rank_by_r2,
    render_metrics_table,
    save_model,
    subset_search,
)
from app.services.feature_table import build_feature_table, features_and_target
from app.services.regressors import fit_knn, fit_linear, fit_random_tree_ensemble
from app.services.softmask_service import split_assign
from app.services.synthgen import generate
from app.utils.errors import MetricsError, ParameterError, SchemaError, SmallHeldoutWarning


class FixedPrediction:
    """입력과 무관하게 저장된 예측을 돌려주는 테스트 더블"""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def predict(self, X):
        return self.values[: len(X)]


class Broken:
    def predict(self, X):
        raise RuntimeError("boom")


def test_ensemble_is_weighted_average():
    members = [FixedPrediction([0.2, 0.0]), FixedPrediction([0.6, 1.0])]
    model = ensemble(members, [0.5, 0.5])
    np.testing.assert_allclose(model.predict(np.zeros((2, 1))), [0.4, 0.5])


def test_ensemble_default_weights_are_uniform():
    model = ensemble([FixedPrediction([0.3])] * 4)
    np.testing.assert_allclose(model.weights, 0.25)


def test_ensemble_prediction_stays_within_member_range():
    rng = np.random.default_rng(0)
    members = [FixedPrediction(rng.random(50)) for _ in range(3)]
    model = ensemble(members, [0.2, 0.5, 0.3])

    stacked = model.member_predictions(np.zeros((50, 1)))
    pred = model.predict(np.zeros((50, 1)))

    assert (pred >= stacked.min(axis=0) - 1e-12).all()
    assert (pred <= stacked.max(axis=0) + 1e-12).all()


@pytest.mark.parametrize("weights", [[0.7, 0.7], [1.2, -0.2], [1.0]])
def test_ensemble_rejects_invalid_weights(weights):
    with pytest.raises(ParameterError):
        ensemble([FixedPrediction([0.1]), FixedPrediction([0.2])], weights)


def test_metrics_hand_example():
    report = metrics([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])

    assert report.rmse == pytest.approx(math.sqrt(1 / 3))
    assert report.mae == pytest.approx(1 / 3)
    assert report.r2 == pytest.approx(1 - 1 / (42 / 9))
    assert report.n == 3


def test_metrics_pearson_variant():
    truth = np.array([0.0, 0.1, 0.2, 0.3])
    report = metrics(2 * truth + 0.1, truth, r2_variant="pearson")
    assert report.r2 == pytest.approx(1.0)
    assert report.r2_variant == "pearson"

    assert metrics(np.full(4, 0.5), truth, r2_variant="pearson").r2 == 0.0


def test_metrics_errors():
    with pytest.raises(MetricsError):
        metrics([0.1, 0.2], [0.3, 0.3])
    with pytest.raises(MetricsError):
        metrics([0.1, 0.2, 0.3], [0.1, 0.2])
    with pytest.raises(ParameterError):
        metrics([0.1, 0.2], [0.1, 0.3], r2_variant="adjusted")


def test_optimize_weights_favors_perfect_member():
    rng = np.random.default_rng(1)
    y = rng.random(200)
    P = np.vstack([y, y + rng.normal(0, 0.3, 200), rng.random(200)])

    weights, r2 = optimize_weights_from_predictions(P, y)

    assert weights[0] >= 0.95
    assert weights.sum() == pytest.approx(1.0)
    assert r2 >= metrics(P[0], y).r2 - 1e-9


def test_optimize_weights_identical_members_stay_uniform():
    y = np.linspace(0, 1, 30)
    P = np.vstack([y * 0.8, y * 0.8, y * 0.8])

    weights, _ = optimize_weights_from_predictions(P, y)

    np.testing.assert_allclose(weights, 1 / 3)


@pytest.mark.parametrize("seed", range(100))
@pytest.mark.parametrize("variant", ["determination", "pearson"])
def test_optimize_weights_never_worse_than_uniform(seed, variant):
    rng = np.random.default_rng(seed)
    y = rng.random(80)
    P = np.vstack([y + rng.normal(0, s, 80) for s in (0.1, 0.2, 0.4)])

    weights, r2 = optimize_weights_from_predictions(P, y, r2_variant=variant)

    uniform = metrics(P.mean(axis=0), y, variant).r2
    assert r2 >= uniform - 1e-12
    assert metrics(weights @ P, y, variant).r2 == pytest.approx(r2)
    assert (weights >= 0).all()


def test_optimize_weights_warns_on_small_heldout():
    y = np.array([0.0, 0.2, 0.4, 0.6, 0.8])
    P = np.vstack([y, y[::-1]])
    with pytest.warns(SmallHeldoutWarning):
        optimize_weights_from_predictions(P, y)


def test_optimize_weights_constant_truth():
    with pytest.raises(MetricsError):
        optimize_weights_from_predictions(np.random.default_rng(0).random((2, 20)), np.full(20, 0.5))


def test_optimize_weights_on_fitted_members():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(120, 2))
    y = np.clip(0.5 + 0.15 * X[:, 0], 0, 1)
    members = [fit_linear(X[:80], y[:80], 0.0), fit_knn(X[:80], y[:80], k=15)]

    weights = optimize_weights(members, X[80:], y[80:])

    assert weights[0] >= 0.95


def test_subset_search_evaluates_every_combination():
    rng = np.random.default_rng(3)
    y = rng.random(60)
    candidates = {f"noisy_{i}": FixedPrediction(y + 0.3 + rng.normal(0, 0.05, 60)) for i in range(9)}
    candidates["perfect"] = FixedPrediction(y)

    result = subset_search(candidates, np.zeros((60, 1)), y, size=3)

    assert len(result.evaluations) == math.comb(10, 3) == 120
    assert "perfect" in result.names
    assert result.r2 == max(score for _, score in result.evaluations)
    assert isinstance(result.ensemble, VotingEnsemble)


def test_subset_search_skips_failing_candidates():
    y = np.linspace(0, 1, 20)
    candidates = {"a": FixedPrediction(y), "b": FixedPrediction(y * 0.5), "bad": Broken()}

    result = subset_search(candidates, np.zeros((20, 1)), y, size=2)

    assert result.names == ("a", "b")
    assert "bad" in result.skipped


def test_subset_search_needs_enough_candidates():
    with pytest.raises(ParameterError):
        subset_search({"a": FixedPrediction([0.1, 0.2])}, np.zeros((2, 1)), [0.1, 0.2], size=3)


def test_fit_candidates_reports_failures():
    X = np.random.default_rng(4).normal(size=(8, 2))
    y = np.linspace(0, 1, 8)

    fitted, failures = fit_candidates(default_candidates(seed=0), X, y)

    assert set(failures) == {"knn_k10", "knn_k20"}
    assert "ridge_l1" in fitted


def test_rank_by_r2_and_table():
    rng = np.random.default_rng(5)
    y = rng.random(30)
    models = {"good": FixedPrediction(y + 0.01), "bad": FixedPrediction(rng.random(30))}

    rows = rank_by_r2(models, np.zeros((30, 1)), y)
    table = render_metrics_table(rows)

    assert [name for name, _ in rows] == ["good", "bad"]
    assert table.splitlines()[0].split() == ["Model", "RMSE", "MAE", "R²"]


def test_model_save_and_load(tmp_path):
    rng = np.random.default_rng(6)
    X = rng.normal(size=(50, 3))
    y = np.clip(0.4 + 0.1 * X[:, 0], 0, 1)
    members = [fit_linear(X, y), fit_knn(X, y, k=3), fit_random_tree_ensemble(X, y, n_trees=5, seed=1)]
    model = ensemble(members, [0.5, 0.3, 0.2], names=["ridge", "knn", "trees"])

    loaded = load_model(save_model(model, tmp_path / "model.json"))

    assert loaded.names == ["ridge", "knn", "trees"]
    np.testing.assert_allclose(loaded.predict(X), model.predict(X))


def test_model_document_is_versioned():
    with pytest.raises(SchemaError):
        model_from_dict({"format": "spraygrid-model", "version": 99, "model": {}})
    with pytest.raises(SchemaError):
        model_from_dict({"format": "spraygrid-model", "version": 1, "model": {"kind": "svr"}})


@pytest.mark.parametrize("seed", range(100))
def test_uniform_ensemble_beats_worst_member_on_synthetic_field(small_spec, seed):
    spec = small_spec.model_copy(update={"seed": seed})
    field = generate(spec)
    labels = split_assign(*field.fraction.shape, seed=seed)
    table = build_feature_table(field.satellite, field.fraction, labels)
    X_train, y_train = features_and_target(table, "train")
    X_held, y_held = features_and_target(table, "heldout")

    members = {
        "knn": fit_knn(X_train, y_train, k=5),
        "trees": fit_random_tree_ensemble(X_train, y_train, n_trees=20, max_depth=6, seed=1),
        "ridge": fit_linear(X_train, y_train, ridge_lambda=1.0),
    }
    singles = [metrics(m.predict(X_held), y_held).r2 for m in members.values()]
    uniform = ensemble(list(members.values()), names=list(members))

    uniform_r2 = metrics(uniform.predict(X_held), y_held).r2
    weighted = ensemble(uniform.members, optimize_weights(uniform.members, X_held, y_held))

    assert uniform_r2 >= min(singles) - 1e-12
    assert metrics(weighted.predict(X_held), y_held).r2 >= uniform_r2 - 1e-12
