"""
Spray planning and model-registry subcommands: plan, report
"""
import argparse
import logging
from pathlib import Path
from typing import Optional, Tuple

from app.commands.common import (
    CommandResult,
    add_common_arguments,
    add_targets_argument,
    load_labels,
    load_raster,
    names_relative,
    target_list,
)
from app.models.raster import GeoRaster
from app.models.schemas import RunConfig, target_key
from app.services.raster_io import read_json, read_raster
from app.services.softmask_service import restrict_to_split
from app.services.spray_planner import coverage_sweep, export_plan, render_sweep, write_sweep_csv
from app.services.sweep_report import (
    Registry,
    best_loss_per_target,
    build_report,
    ingest_record,
    landscape_plot,
    published_records,
    render_report,
)
from app.utils.errors import ParameterError

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    plan = subparsers.add_parser("plan", help="coverage-target spray plan and threshold sweep")
    plan.add_argument("--pred", required=True, help="prediction raster")
    plan.add_argument("--truth", required=True, help="binary or fraction truth raster")
    plan.add_argument("--select-on", help="prediction raster used to choose thresholds (e.g. held-out)")
    plan.add_argument("--select-truth", help="truth for --select-on (default: --truth)")
    plan.add_argument("--labels", help="split labels: choose thresholds on heldout, report on test")
    add_targets_argument(plan)
    add_common_arguments(plan)
    plan.set_defaults(
        handler=run_plan,
        inputs=lambda a: {
            "pred": a.pred, "truth": a.truth, "select_on": a.select_on, "select_truth": a.select_truth,
            "labels": a.labels,
        },
    )

    report = subparsers.add_parser("report", help="registry tables and performance landscape")
    report.add_argument("--registry", required=True, help="registry directory (one JSON per model)")
    report.add_argument("--target", type=float, default=99.0, help="ranking target in percent (default 99)")
    report.add_argument("--architecture", help="only records of this architecture (e.g. UNET)")
    report.add_argument("--plot", help="SVG output path")
    report.add_argument("--csv", help="CSV output path")
    report.add_argument("--ingest", action="append", default=None, help="record metadata JSON to add first")
    report.add_argument("--pred", help="prediction raster for --ingest (recomputes excess)")
    report.add_argument("--truth", help="truth raster for --pred")
    report.add_argument("--labels", help="split labels for --pred: heldout selects, test reports")
    report.add_argument("--published", action="store_true", help="add the published sweep rows as declared records")
    add_common_arguments(report)
    report.set_defaults(
        handler=run_report,
        inputs=lambda a: {"registry": a.registry, "pred": a.pred, "truth": a.truth, "labels": a.labels},
    )


def _split_pair(
    pred: GeoRaster, truth: GeoRaster, labels_path: Optional[str]
) -> Tuple[Tuple[GeoRaster, GeoRaster], Optional[Tuple[GeoRaster, GeoRaster]]]:
    """labels 가 있으면 (test 쌍, heldout 쌍), 없으면 (전체 쌍, None)"""
    labels = load_labels(labels_path)
    if labels is None:
        return (pred, truth), None
    evaluate = (restrict_to_split(pred, labels, "test"), restrict_to_split(truth, labels, "test"))
    select = (restrict_to_split(pred, labels, "heldout"), restrict_to_split(truth, labels, "heldout"))
    return evaluate, select


def run_plan(args: argparse.Namespace, run: RunConfig) -> CommandResult:
    pred = load_raster(args.pred, "pred")
    truth = load_raster(args.truth, "truth")
    if args.labels and args.select_on:
        raise ParameterError("--labels and --select-on are mutually exclusive")

    (eval_pred, eval_truth), select = _split_pair(pred, truth, args.labels)
    if args.select_on:
        select_truth = read_raster(args.select_truth) if args.select_truth else truth
        select = (read_raster(args.select_on), select_truth)

    targets = target_list(run.targets)
    plans = coverage_sweep(eval_pred, eval_truth, targets, select_on=select, threads=run.threads)

    summary = {
        "mode": plans[0].mode,
        "rows": [plan.to_dict() for plan in plans],
    }
    if run.output is not None:
        out = Path(run.output)
        exported = {}
        for plan in plans:
            paths = export_plan(plan, out / f"target_{target_key(plan.target_coverage)}")
            exported.update({f"{target_key(plan.target_coverage)}/{k}": v for k, v in paths.items()})
        exported["sweep_csv"] = write_sweep_csv(plans, out / "sweep.csv")
        summary["paths"] = names_relative(exported, out)

    return CommandResult(summary=summary, tables=[render_sweep(plans)])


def run_report(args: argparse.Namespace, run: RunConfig) -> CommandResult:
    registry = Registry(args.registry)
    ingested = []

    if args.published:
        for record in published_records():
            registry.append(ingest_record(record))
            ingested.append(record.name)

    if args.pred and not args.ingest:
        raise ParameterError("--pred requires --ingest metadata")
    for meta_path in args.ingest or []:
        metadata = read_json(meta_path)
        if args.pred:
            pred = read_raster(args.pred)
            truth = load_raster(args.truth, "truth")
            (eval_pred, eval_truth), heldout = _split_pair(pred, truth, args.labels)
            record = ingest_record(metadata, eval_pred, eval_truth, heldout=heldout, targets=target_list(None))
            record = record.model_copy(update={"prediction_path": str(args.pred)})
        else:
            record = ingest_record(metadata)
        registry.append(record)
        ingested.append(record.name)

    records = registry.records()
    report = build_report(records, target=args.target, architecture=args.architecture)
    winners = best_loss_per_target(records, architecture=args.architecture)

    summary = {"ingested": ingested, "report": report.to_dict(), "best_per_target": winners}
    if args.plot or args.csv:
        frame = landscape_plot(report.records, svg_path=args.plot, csv_path=args.csv, target=args.target)
        summary["landscape"] = {"markers": len(frame), "encoder_groups": sorted(frame["encoder_group"].unique())}

    return CommandResult(summary=summary, tables=[render_report(report)])
