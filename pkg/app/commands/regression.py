"""
Pixel-regression subcommands: features, fit, eval, predict
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from app.commands.common import (
    CommandResult,
    add_common_arguments,
    add_r2_argument,
    check_split,
    load_labels,
    load_raster,
    names_relative,
)
from app.models.raster import acres
from app.models.schemas import RunConfig
from app.services.ensemble_service import (
    default_candidates,
    ensemble,
    fit_candidates,
    load_model,
    metrics,
    optimize_weights,
    rank_by_r2,
    render_metrics_table,
    save_model,
    subset_search,
)
from app.services.feature_table import (
    build_feature_table,
    features_and_target,
    predict_raster,
    read_feature_table,
    write_feature_cache,
    write_feature_csv,
)
from app.services.raster_io import write_json, write_raster
from app.services.raster_service import align
from app.services.regressors import RidgeRegressor
from app.services.softmask_service import SPLIT_NAMES, area_report, compare_areas, restrict_to_split
from app.utils.errors import AlignmentError, ParameterError
from app.utils.setting import get_config

logger = logging.getLogger(__name__)

TOP_CANDIDATES = 10


def register(subparsers) -> None:
    features = subparsers.add_parser("features", help="build the per-pixel feature table")
    features.add_argument("--sat", required=True, help="10-band satellite raster")
    features.add_argument("--fraction", required=True, help="weed-fraction mask")
    features.add_argument("--labels", required=True, help="split labels raster")
    add_common_arguments(features, out_required=True)
    features.set_defaults(
        handler=run_features, inputs=lambda a: {"sat": a.sat, "fraction": a.fraction, "labels": a.labels}
    )

    fit = subparsers.add_parser("fit", help="fit candidates, search 3-model subsets, optimize weights")
    fit.add_argument("--features", required=True, help="feature table (.csv or .npz)")
    fit.add_argument("--subset-size", type=int, default=None, help="ensemble size (default 3)")
    fit.add_argument("--uniform", action="store_true", help="keep uniform weights (skip weight optimization)")
    add_r2_argument(fit)
    add_common_arguments(fit, out_required=True)
    fit.set_defaults(handler=run_fit, inputs=lambda a: {"features": a.features})

    evaluate = subparsers.add_parser("eval", help="RMSE / MAE / R² of a prediction")
    evaluate.add_argument("--pred", help="prediction raster")
    evaluate.add_argument("--truth", help="weed-fraction raster")
    evaluate.add_argument("--labels", help="split labels raster (restricts to --split-name)")
    evaluate.add_argument("--model", help="model JSON (evaluated on --features instead of rasters)")
    evaluate.add_argument("--features", help="feature table for --model")
    evaluate.add_argument("--split-name", default="test", help="train | heldout | test (default test)")
    add_r2_argument(evaluate)
    add_common_arguments(evaluate)
    evaluate.set_defaults(
        handler=run_eval,
        inputs=lambda a: {
            "pred": a.pred, "truth": a.truth, "labels": a.labels, "model": a.model, "features": a.features,
        },
    )

    predict = subparsers.add_parser("predict", help="apply a model to a satellite raster")
    predict.add_argument("--model", required=True, help="model JSON")
    predict.add_argument("--sat", required=True, help="10-band satellite raster")
    add_common_arguments(predict, out_required=True)
    predict.set_defaults(handler=run_predict, inputs=lambda a: {"model": a.model, "sat": a.sat})


def run_features(args: argparse.Namespace, run: RunConfig) -> CommandResult:
    out = Path(run.output)
    sat = load_raster(args.sat, "sat")
    fraction = load_raster(args.fraction, "fraction")
    labels = load_labels(args.labels)
    if not sat.same_grid(fraction):
        logger.info("Satellite raster is off the fraction grid; aligning with bilinear resampling")
        sat = align(sat, fraction, method="bilinear", threads=run.threads)

    table = build_feature_table(sat, fraction, labels)
    paths = {
        "csv": write_feature_csv(table, out / "features.csv"),
        "cache": write_feature_cache(table, out / "features.npz"),
    }
    counts = {split: int((table["split"] == split).sum()) for split in SPLIT_NAMES}
    return CommandResult(summary={"rows": len(table), "split_counts": counts, "paths": names_relative(paths, out)})


def _linear_terms(model) -> dict:
    """앙상블의 ridge 멤버별 원래 피처 단위 (coef, intercept)"""
    terms = {}
    for name, member in zip(model.names, model.members):
        if isinstance(member, RidgeRegressor):
            coef, intercept = member.coefficients()
            terms[name] = {"coef": coef.tolist(), "intercept": intercept}
    return terms


def run_fit(args: argparse.Namespace, run: RunConfig) -> CommandResult:
    """
    후보 학습 -> held-out R² 순위 -> 상위 후보의 size-부분집합 탐색 -> 가중치 최적화 -> test 비교
    """
    out = Path(run.output)
    table = read_feature_table(args.features)
    X_train, y_train = features_and_target(table, "train")
    X_held, y_held = features_and_target(table, "heldout")
    X_test, y_test = features_and_target(table, "test")
    if len(y_held) == 0:
        raise ParameterError("Feature table has no held-out rows")

    fitted, failures = fit_candidates(default_candidates(run.seed, run.threads), X_train, y_train)
    ranking = rank_by_r2(fitted, X_held, y_held, run.r2_variant, top=TOP_CANDIDATES)
    top = {name: fitted[name] for name, _ in ranking}

    size = args.subset_size or get_config().ENSEMBLE_SUBSET_SIZE
    search = subset_search(top, X_held, y_held, size=size, r2_variant=run.r2_variant)
    uniform = search.ensemble

    if args.uniform or len(uniform.members) < 2:
        final = uniform
    else:
        weights = optimize_weights(uniform.members, X_held, y_held, r2_variant=run.r2_variant)
        final = ensemble(uniform.members, weights, names=uniform.names)

    reports = {}
    for split, (X, y) in {"heldout": (X_held, y_held), "test": (X_test, y_test)}.items():
        if len(y) < 2:
            continue
        reports[split] = [
            ("uniform", metrics(uniform.predict(X), y, run.r2_variant)),
            ("weighted", metrics(final.predict(X), y, run.r2_variant)),
        ]
    comparison = {split: {name: r.to_dict() for name, r in rows} for split, rows in reports.items()}

    paths = {
        "model": save_model(final, out / "model.json"),
        "uniform_model": save_model(uniform, out / "uniform_model.json"),
        "ranking": write_json(
            [{"name": name, **report.to_dict()} for name, report in ranking], out / "ranking.json"
        ),
    }
    summary = {
        "candidates": sorted(fitted),
        "failed": failures,
        "subset": search.to_dict(),
        "weights": dict(zip(final.names, final.weights.tolist())),
        "linear_terms": _linear_terms(final),
        "metrics": comparison,
        "paths": names_relative(paths, out),
    }

    tables = [f"Top {len(ranking)} candidates on held-out\n" + render_metrics_table(ranking)]
    for split, rows in reports.items():
        tables.append(f"VotingEnsemble ({'+'.join(final.names)}) on {split}\n" + render_metrics_table(rows))
    return CommandResult(summary=summary, tables=tables)


def run_eval(args: argparse.Namespace, run: RunConfig) -> CommandResult:
    split = check_split(args.split_name)
    if args.model:
        if not args.features:
            raise ParameterError("--model needs --features")
        model = load_model(args.model)
        X, y = features_and_target(read_feature_table(args.features), split)
        report = metrics(model.predict(X), y, run.r2_variant)
        return CommandResult(summary={"split": split, "metrics": report.to_dict()})

    pred = load_raster(args.pred, "pred")
    truth = load_raster(args.truth, "truth")
    labels = load_labels(args.labels)
    if labels is not None:
        pred = restrict_to_split(pred, labels, split)
        truth = restrict_to_split(truth, labels, split)
    else:
        split = None

    if not pred.same_grid(truth):
        raise AlignmentError("--pred and --truth must share a grid")
    valid = pred.valid_mask() & truth.valid_mask()
    report = metrics(pred.band(0)[valid].astype(np.float64), truth.band(0)[valid].astype(np.float64), run.r2_variant)
    summary = {
        "split": split,
        "metrics": report.to_dict(),
        "areas": compare_areas(pred, truth),
        "truth_area": area_report(truth).to_dict(),
    }
    return CommandResult(summary=summary)


def run_predict(args: argparse.Namespace, run: RunConfig) -> CommandResult:
    out = Path(run.output)
    model = load_model(args.model)
    sat = load_raster(args.sat, "sat")
    prediction = predict_raster(model, sat)
    paths = {"prediction": write_raster(prediction, out / "prediction.grf")}

    valid = prediction.valid_mask()
    pixel_area = prediction.require_transform().pixel_area
    predicted = float(prediction.band(0)[valid].astype(np.float64).sum()) * pixel_area
    summary = {
        "pixels": int(valid.sum()),
        "predicted_weed_acres": acres(predicted),
        "paths": names_relative(paths, out),
    }
    return CommandResult(summary=summary)
