"""
Field preparation subcommands: synth, softmask, composite
"""
import argparse
import logging
from pathlib import Path

from pydantic import ValidationError

from app.commands.common import (
    CommandResult,
    add_common_arguments,
    add_split_argument,
    float_list,
    load_raster,
    names_relative,
)
from app.models.schemas import FieldSpec, RunConfig
from app.services.raster_io import read_json, read_raster, write_json, write_png_mask, write_raster, write_rgb_png
from app.services.raster_service import RESAMPLING_METHODS, align, false_color_composite
from app.services.softmask_service import (
    SPLIT_NAMES,
    area_report,
    block_fraction,
    labels_raster,
    split_assign,
)
from app.services.synthgen import generate, write_field
from app.utils.errors import ParameterError, SchemaError
from app.utils.setting import get_config

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    synth = subparsers.add_parser("synth", help="generate a synthetic field")
    synth.add_argument("--spec", help="FieldSpec JSON (default: built-in demo field)")
    add_common_arguments(synth, out_required=True)
    synth.set_defaults(handler=run_synth, inputs=lambda a: {"spec": a.spec})

    softmask = subparsers.add_parser("softmask", help="drone mask -> weed-fraction mask and split labels")
    softmask.add_argument("--mask", required=True, help="binary drone mask (GRF or PNG with sidecar)")
    softmask.add_argument("--factor", type=int, default=None, help="block size in drone pixels (default 200)")
    softmask.add_argument("--align-to", help="resample the mask onto this raster's grid first")
    softmask.add_argument("--method", choices=RESAMPLING_METHODS, default="nearest", help="alignment kernel")
    softmask.add_argument("--block-meters", type=float, default=None, help="spatial split block size in meters")
    add_split_argument(softmask)
    add_common_arguments(softmask, out_required=True)
    softmask.set_defaults(handler=run_softmask, inputs=lambda a: {"mask": a.mask, "align_to": a.align_to})

    composite = subparsers.add_parser("composite", help="false-color composite (default R=nir, G=green, B=vre2)")
    composite.add_argument("--sat", required=True, help="10-band satellite raster")
    composite.add_argument("--mapping", default=None, help="three band roles for R,G,B")
    composite.add_argument(
        "--percentiles",
        type=float_list,
        default=None,
        help="stretch percentiles lo,hi (a constant band becomes an all-zero channel)",
    )
    add_common_arguments(composite, out_required=True)
    composite.set_defaults(handler=run_composite, inputs=lambda a: {"sat": a.sat})


def run_synth(args: argparse.Namespace, run: RunConfig) -> CommandResult:
    payload = read_json(args.spec) if args.spec else {}
    if args.seed is not None or "seed" not in payload:
        payload["seed"] = run.seed
    try:
        spec = FieldSpec.model_validate(payload)
    except ValidationError as e:
        raise SchemaError(f"Invalid field spec: {e}") from None

    field = generate(spec, threads=run.threads)
    summary = write_field(field, run.output)
    summary.pop("patches")

    area = summary["area"]
    table = (
        f"Field {spec.extent_m[0]:g} m x {spec.extent_m[1]:g} m, "
        f"{area['total_land_acres']:.2f} acres, weed {area['weed_acres']:.3f} acres ({area['weed_pct']:.2f}%)"
    )
    return CommandResult(summary=summary, tables=[table])


def run_softmask(args: argparse.Namespace, run: RunConfig) -> CommandResult:
    config = get_config()
    out = Path(run.output)
    mask = load_raster(args.mask, "mask")
    if args.align_to:
        mask = align(mask, read_raster(args.align_to), method=args.method, threads=run.threads)

    factor = args.factor or config.SOFTMASK_FACTOR
    fraction = block_fraction(mask, factor)

    block_meters = args.block_meters or config.SPLIT_BLOCK_METERS
    block = max(1, int(round(block_meters / fraction.require_transform().pixel_w)))
    labels = split_assign(fraction.height, fraction.width, run.split_fractions, block=block, seed=run.seed)

    paths = {
        "fraction": write_raster(fraction, out / "fraction.grf"),
        "labels": write_raster(labels_raster(labels, fraction), out / "labels.grf"),
    }
    if mask.dtype == "u8" and mask.nodata is None:
        paths["mask_png"] = write_png_mask(mask, out / "drone_mask.png")

    areas = {"all": area_report(fraction).to_dict()}
    for split in SPLIT_NAMES:
        if (labels == SPLIT_NAMES[split]).any():
            areas[split] = area_report(fraction, labels, split).to_dict()
    counts = {split: int((labels == value).sum()) for split, value in SPLIT_NAMES.items()}
    write_json(areas, out / "area.json")

    rows = [f"{'split':<8} {'land acres':>11} {'weed acres':>11} {'weed %':>8}"]
    for name, report in areas.items():
        rows.append(
            f"{name:<8} {report['total_land_acres']:>11.3f} {report['weed_acres']:>11.3f} {report['weed_pct']:>7.2f}%"
        )

    summary = {
        "factor": factor,
        "split_block_pixels": block,
        "split_counts": counts,
        "area": areas,
        "paths": names_relative(paths, out),
    }
    return CommandResult(summary=summary, tables=["\n".join(rows)])


def run_composite(args: argparse.Namespace, run: RunConfig) -> CommandResult:
    out = Path(run.output)
    sat = load_raster(args.sat, "sat")
    mapping = tuple(part.strip() for part in args.mapping.split(",")) if args.mapping else None
    if args.percentiles is not None and len(args.percentiles) != 2:
        raise ParameterError(f"--percentiles needs lo,hi, got {args.percentiles}")

    composite = false_color_composite(sat, mapping=mapping, percentiles=args.percentiles)
    paths = {
        "composite": write_raster(composite, out / "composite.grf"),
        "png": write_rgb_png(composite, out / "composite.png"),
    }
    summary = {
        "mapping": list(composite.band_names),
        "width": composite.width,
        "height": composite.height,
        "paths": names_relative(paths, out),
    }
    return CommandResult(summary=summary)
