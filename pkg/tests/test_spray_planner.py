import json
from fractions import Fraction

import numpy as np
import pytest

from app.models.raster import acres
from app.services.spray_planner import (
    coverage_curve,
    coverage_sweep,
    excess_from_land_pct,
    excess_pct,
    export_plan,
    make_plan,
    mask_runs,
    plan_transfer,
    render_sweep,
    select_threshold,
    spray_mask,
    write_sweep_csv,
)
from app.utils.errors import (
    AlignmentError,
    InfeasibleTargetError,
    ParameterError,
    UndefinedCoverageError,
)
from tests.conftest import make_raster


@pytest.fixture
def four_pixels():
    pred = make_raster(np.array([[0.9, 0.6, 0.3, 0.1]], dtype=np.float32))
    truth = make_raster(np.array([[0.5, 0.2, 0.0, 0.1]], dtype=np.float32))
    return pred, truth


def test_four_pixel_curve(four_pixels):
    curve = coverage_curve(*four_pixels)

    np.testing.assert_allclose(curve.thresholds, [0.9, 0.6, 0.3, 0.1], rtol=1e-6)
    np.testing.assert_allclose(curve.weed_covered, [0.625, 0.875, 0.875, 1.0], rtol=1e-6)
    np.testing.assert_array_equal(curve.land_pixels, [1, 2, 3, 4])


def test_four_pixel_thresholds(four_pixels):
    curve = coverage_curve(*four_pixels)

    assert select_threshold(curve, 90) == pytest.approx(0.1)
    assert select_threshold(curve, 80) == pytest.approx(0.6)
    assert select_threshold(curve, 100) == pytest.approx(0.1)


def test_curve_is_monotone():
    rng = np.random.default_rng(0)
    pred = make_raster(rng.random((30, 30)))
    truth = make_raster(rng.random((30, 30)) * (rng.random((30, 30)) < 0.2))

    curve = coverage_curve(pred, truth)

    assert (np.diff(curve.thresholds) < 0).all()
    assert (np.diff(curve.weed_units) >= 0).all()
    assert (np.diff(curve.land_pixels) > 0).all()
    assert curve.weed_covered[-1] == 1.0


def _oracle_threshold(pred, weed, target):
    """고유 예측값을 내림차순으로 시도하며 weed 합을 유리수로 정확히 누적"""
    by_score = {}
    for score, value in zip(pred.tolist(), weed.tolist()):
        by_score[score] = by_score.get(score, Fraction(0)) + Fraction(value)
    total = sum(by_score.values(), Fraction(0))

    covered = Fraction(0)
    for score in sorted(by_score, reverse=True):
        covered += by_score[score]
        if covered * 100 >= target * total:
            return score
    return None


def _random_weed(rng, n, denominator):
    weed = (rng.integers(0, denominator + 1, n) / denominator) * (rng.random(n) < rng.uniform(0.05, 1.0))
    if weed.sum() == 0:
        weed[int(rng.integers(0, n))] = 1.0
    return weed.astype(np.float32)


@pytest.mark.parametrize("denominator", [8, 40000], ids=["eighths", "factor200"])
def test_select_threshold_matches_exhaustive_oracle(denominator):
    rng = np.random.default_rng(2024 + denominator)
    for _ in range(500):
        n = int(rng.integers(1, 400))
        levels = int(rng.integers(1, 50))
        pred = (rng.integers(0, levels, n) / levels).astype(np.float32)
        ties = rng.random(n) < 0.5
        pred[ties] = pred[0]
        weed = _random_weed(rng, n, denominator)
        target = int(rng.integers(1, 101))

        curve = coverage_curve(make_raster(pred[None, :]), make_raster(weed[None, :]))

        assert select_threshold(curve, target) == _oracle_threshold(pred, weed, target)


def test_half_coverage_boundary_uses_exact_sums():
    weed = np.array([[269, 131, 138]], dtype=np.float64) / 40000.0
    weed = weed.astype(np.float32)
    pred = make_raster(np.array([[0.6, 0.55, 0.55]], dtype=np.float32))

    curve = coverage_curve(pred, make_raster(weed))
    expected = _oracle_threshold(pred.band(0).reshape(-1), weed.reshape(-1), 50)

    assert select_threshold(curve, 50) == expected


def test_binary_truth_counts_pixels():
    truth = make_raster(np.array([[1, 0, 1, 1]], dtype=np.uint8))
    pred = make_raster(np.array([[0.9, 0.8, 0.7, 0.1]], dtype=np.float32))

    curve = coverage_curve(pred, truth)

    assert curve.total_weed_units == 3
    np.testing.assert_array_equal(curve.weed_units, [1, 1, 2, 3])


def test_tiny_fractions_accumulate_exactly():
    weed = np.array([[1.0, 2.0 ** -140, 2.0 ** -140]], dtype=np.float32)
    pred = make_raster(np.array([[0.9, 0.5, 0.1]], dtype=np.float32))

    curve = coverage_curve(pred, make_raster(weed))

    assert int(curve.weed_units[0]) < curve.total_weed_units
    assert select_threshold(curve, 100) == pytest.approx(0.1)


def test_curve_independent_of_chunking(monkeypatch):
    rng = np.random.default_rng(5)
    pred = make_raster(np.round(rng.random((40, 40)), 2))
    truth = make_raster(rng.random((40, 40)) * (rng.random((40, 40)) < 0.3))
    whole = coverage_curve(pred, truth)

    monkeypatch.setattr("app.services.spray_planner.CURVE_CHUNK", 37)
    chunked = coverage_curve(pred, truth, threads=4)

    np.testing.assert_array_equal(whole.thresholds, chunked.thresholds)
    np.testing.assert_array_equal(whole.weed_units, chunked.weed_units)
    np.testing.assert_array_equal(whole.land_pixels, chunked.land_pixels)


@pytest.mark.parametrize("seed", range(100))
def test_spray_mask_invariant_under_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 1000, (25, 25))
    pred = make_raster(codes / 1000.0)
    warped = make_raster(np.exp(codes / 1000.0) * 3.0 + 1.0)
    truth = make_raster((rng.random((25, 25)) < 0.15).astype(np.uint8))

    for target in (50, 90, 95, 98, 99, 100):
        a = make_plan(pred, truth, target)
        b = make_plan(warped, truth, target)
        np.testing.assert_array_equal(a.spray_mask.band(0), b.spray_mask.band(0))
        assert a.excess_pct == b.excess_pct


def test_perfect_binary_predictor_sprays_exactly_the_weed():
    rng = np.random.default_rng(7)
    truth = make_raster((rng.random((50, 50)) < 0.1).astype(np.uint8))
    pred = make_raster(truth.band(0).astype(np.float32))

    plans = coverage_sweep(pred, truth, [90, 95, 98, 99])

    for plan in plans:
        assert plan.threshold == 1.0
        assert plan.achieved_coverage == pytest.approx(100.0)
        assert plan.excess_pct == pytest.approx(0.0)


def test_strictly_ranked_perfect_predictor_excess_is_target_minus_100():
    rng = np.random.default_rng(8)
    weed = rng.random((60, 60)) < 0.1
    confidence = np.zeros((60, 60), dtype=np.float32)
    confidence[weed] = rng.permutation(np.linspace(0.5, 1.0, int(weed.sum()))).astype(np.float32)
    truth = make_raster(weed.astype(np.uint8))

    plans = coverage_sweep(make_raster(confidence), truth, [90, 95, 98, 99])

    for plan in plans:
        assert plan.excess_pct == pytest.approx(plan.target_coverage - 100.0, abs=0.5)
        assert plan.achieved_coverage >= plan.target_coverage


def test_constant_predictions_spray_everything():
    truth = make_raster(np.array([[1, 0], [0, 1]], dtype=np.uint8))
    pred = make_raster(np.full((2, 2), 0.4, dtype=np.float32))

    curve = coverage_curve(pred, truth)
    plan = make_plan(pred, truth, 50)

    assert len(curve) == 1
    assert plan.sprayed_pixels == 4
    assert plan.excess_pct == pytest.approx(100.0)


def test_threshold_is_inclusive():
    pred = make_raster(np.array([[0.5, 0.5, 0.2]], dtype=np.float32))
    np.testing.assert_array_equal(spray_mask(pred, 0.5).band(0), [[1, 1, 0]])


def test_unreachable_target_where_prediction_is_missing():
    pred = make_raster(np.array([[0.9, -9999.0]], dtype=np.float32), nodata=-9999.0)
    truth = make_raster(np.array([[1, 1]], dtype=np.uint8))

    curve = coverage_curve(pred, truth)

    assert select_threshold(curve, 50) == pytest.approx(0.9)
    with pytest.raises(InfeasibleTargetError) as info:
        select_threshold(curve, 60)
    assert info.value.max_coverage == pytest.approx(50.0)


def test_zero_weed_is_undefined():
    with pytest.raises(UndefinedCoverageError):
        coverage_curve(make_raster(np.ones((2, 2), dtype=np.float32)), make_raster(np.zeros((2, 2), dtype=np.uint8)))


def test_grid_mismatch():
    pred = make_raster(np.ones((2, 2), dtype=np.float32), pixel=10.0)
    truth = make_raster(np.ones((2, 2), dtype=np.uint8), pixel=5.0)
    with pytest.raises(AlignmentError):
        coverage_curve(pred, truth)


def test_target_range(four_pixels):
    curve = coverage_curve(*four_pixels)
    for target in (0, -5, 100.5):
        with pytest.raises(ParameterError):
            select_threshold(curve, target)


def test_plan_fields_are_consistent(four_pixels):
    pred, truth = four_pixels
    plan = make_plan(pred, truth, 80)

    pixel_acres = acres(100.0)
    assert plan.mode == "same-data"
    assert plan.sprayed_pixels == 2
    assert plan.land_sprayed == pytest.approx(2 * pixel_acres)
    assert plan.weed_area == pytest.approx(0.8 * pixel_acres, rel=1e-6)
    assert plan.land_pct == pytest.approx(50.0)
    assert plan.excess_pct == pytest.approx((plan.land_sprayed - plan.weed_area) / plan.weed_area * 100)
    assert not plan.below_target


def test_sweep_is_monotone_in_target():
    rng = np.random.default_rng(9)
    truth = make_raster(rng.random((40, 40)) * (rng.random((40, 40)) < 0.1))
    pred = make_raster(np.clip(truth.band(0) + rng.normal(0, 0.1, (40, 40)), 0, 1))

    plans = coverage_sweep(pred, truth, [99, 90, 98, 95])

    assert [p.target_coverage for p in plans] == [90, 95, 98, 99]
    land = [p.land_sprayed for p in plans]
    excess = [p.excess_pct for p in plans]
    assert land == sorted(land)
    assert excess == sorted(excess)
    assert render_sweep(plans).splitlines()[0].split() == ["Threshold", "Weed", "%", "Land", "%", "Land", "Acres", "Excess", "%"]


def test_single_full_coverage_target():
    pred = make_raster(np.array([[0.8, 0.3, 0.05]], dtype=np.float32))
    truth = make_raster(np.array([[1, 1, 0]], dtype=np.uint8))

    (plan,) = coverage_sweep(pred, truth, [100])

    assert plan.threshold == pytest.approx(0.3)
    assert plan.sprayed_pixels == 2


def test_transfer_mode_flags_shortfall():
    select_pred = make_raster(np.array([[0.9, 0.8, 0.1, 0.1]], dtype=np.float32))
    select_truth = make_raster(np.array([[1, 1, 0, 0]], dtype=np.uint8))
    eval_pred = make_raster(np.array([[0.9, 0.5, 0.1, 0.1]], dtype=np.float32))
    eval_truth = make_raster(np.array([[1, 1, 0, 0]], dtype=np.uint8))

    plan = plan_transfer(select_pred, select_truth, eval_pred, eval_truth, 99)

    assert plan.mode == "transfer"
    assert plan.threshold == pytest.approx(0.8)
    assert plan.achieved_coverage == pytest.approx(50.0)
    assert plan.below_target


def test_transfer_sweep_uses_selection_data():
    select = (
        make_raster(np.array([[0.9, 0.2]], dtype=np.float32)),
        make_raster(np.array([[1, 1]], dtype=np.uint8)),
    )
    pred = make_raster(np.array([[0.9, 0.1]], dtype=np.float32))
    truth = make_raster(np.array([[1, 0]], dtype=np.uint8))

    (plan,) = coverage_sweep(pred, truth, [100], select_on=select)

    assert plan.threshold == pytest.approx(0.2)
    assert plan.excess_pct == pytest.approx(0.0)


def test_excess_identity_from_published_land_fractions():
    rows = excess_from_land_pct(50.0, 2.45, [42, 53, 68, 83])

    computed = [row["excess_pct"] for row in rows]
    np.testing.assert_allclose(computed, [757.14, 981.63, 1287.76, 1593.88], atol=0.01)
    for value, published in zip(computed, [766, 984, 1300, 1590]):
        assert abs(value - published) <= 15
    assert rows[0]["land_acres"] == pytest.approx(21.0)


def test_excess_pct_requires_weed():
    assert excess_pct(3.0, 2.0) == pytest.approx(50.0)
    with pytest.raises(UndefinedCoverageError):
        excess_pct(1.0, 0.0)


def test_mask_runs_shapes():
    assert mask_runs(np.zeros((3, 3), dtype=bool)) == []
    assert mask_runs(np.ones((3, 4), dtype=bool)) == [{"row": 0, "col": 0, "height": 3, "width": 4}]

    checker = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(bool)
    runs = mask_runs(checker)
    assert len(runs) == 8
    assert all(r["width"] == 1 and r["height"] == 1 for r in runs)


def test_mask_runs_cover_mask_exactly():
    rng = np.random.default_rng(10)
    mask = rng.random((15, 20)) < 0.4
    rebuilt = np.zeros_like(mask)
    for r in mask_runs(mask):
        assert not rebuilt[r["row"]:r["row"] + r["height"], r["col"]:r["col"] + r["width"]].any()
        rebuilt[r["row"]:r["row"] + r["height"], r["col"]:r["col"] + r["width"]] = True
    np.testing.assert_array_equal(rebuilt, mask)


def test_export_plan(tmp_path):
    rng = np.random.default_rng(11)
    truth = make_raster((rng.random((12, 12)) < 0.2).astype(np.uint8))
    pred = make_raster(np.clip(truth.band(0) * 0.7 + rng.random((12, 12)) * 0.4, 0, 1))
    plan = make_plan(pred, truth, 95)

    paths = export_plan(plan, tmp_path / "plan")

    summary = json.loads((tmp_path / "plan" / "plan.json").read_text())
    recomputed = (summary["land_sprayed_acres"] - summary["weed_acres"]) / summary["weed_acres"] * 100
    assert recomputed == pytest.approx(summary["excess_pct"], abs=1e-9)

    runs = json.loads((tmp_path / "plan" / "runs.json").read_text())
    assert sum(r["width"] * r["height"] for r in runs["rectangles"]) == plan.sprayed_pixels
    assert set(paths) == {"spray_mask", "plan", "runs"}


def test_export_empty_plan(tmp_path):
    truth = make_raster(np.array([[1, 0]], dtype=np.uint8))
    pred = make_raster(np.array([[0.9, 0.1]], dtype=np.float32))
    plan = make_plan(pred, truth, 90, threshold=2.0)

    export_plan(plan, tmp_path)

    runs = json.loads((tmp_path / "runs.json").read_text())
    assert runs["rectangles"] == []
    assert plan.land_sprayed == 0.0
    assert plan.below_target


def test_sweep_csv(tmp_path, four_pixels):
    path = write_sweep_csv(coverage_sweep(*four_pixels, [80, 90]), tmp_path / "sweep.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "Threshold,Weed %,Land %,Land Acres,Excess %"
    assert len(lines) == 3
