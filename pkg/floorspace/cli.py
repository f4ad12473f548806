"""
Command-line front end - one command per pipeline stage.

Every command writes its artifacts plus provenance.json to its output
directory and prints a one-line summary on stdout. Logs go to stderr; a
failure prints one JSON error line on stderr and exits with the error
family's code.
"""

import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import click
import numpy as np
import torch

from .aggregate import r2_curve, scatter_export, write_curve_csv, write_scatter_csv
from .config import PipelineConfig, load_config, parse_overrides, version_stamp, write_provenance
from .dataset import BAND_SETS, build_tileset, load_tileset, save_tileset
from .errors import (
    USAGE_EXIT_CODE,
    AlignmentError,
    ConfigError,
    FloorspaceError,
    GradientCheckFailed,
    InternalError,
    MissingInputError,
)
from .inference import checkpoint_meta, compose_two_stage, predict, predict_two_stage
from .ingest import BandStack, composite, read_scene_list, stack_bands
from .metrics import evaluate, write_histogram_csv, write_report_csv, write_report_json
from .model import FloorspaceModel, ModelConfig, load_model, save_model
from .ntl import align_to_ntl, log_diff_map, ntl_grid_like, write_fit_json
from .raster import LabelGrid, Raster, load_polygons, rasterize
from .raster_io import read_fsr, write_fsr
from .render import PALETTES, render_map
from .training import (
    gradient_check,
    iter_parameter_groups,
    random_batch,
    sweep_task_coefficients,
    train as train_model,
    write_history_csv,
)

logger = logging.getLogger("floorspace")


@dataclass
class RunContext:
    config: PipelineConfig
    threads: int
    progress: bool


def _configure_logging(ctx: click.Context, verbose: bool):
    """Attach a stderr handler to the package logger for the length of one command"""
    # stdout carries the one-line summary
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("[floorspace] %(levelname)s %(name)s: %(message)s"))
    previous = (logger.level, logger.propagate)
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False

    def release():
        logger.removeHandler(handler)
        logger.setLevel(previous[0])
        logger.propagate = previous[1]

    ctx.call_on_close(release)


def _emit(error: FloorspaceError):
    click.echo(json.dumps(error.to_record()), err=True)


def _read(path: str) -> Raster:
    if not Path(path).exists():
        raise MissingInputError(f"input not found: {path}")
    return read_fsr(path)


def _read_labels(directory: str) -> LabelGrid:
    """mask.fsr + height.fsr written by rasterize or predict"""
    d = Path(directory)
    return LabelGrid(mask=_read(str(d / "mask.fsr")), height_m=_read(str(d / "height.fsr")))


def _cell(value: Optional[float]) -> str:
    return "null" if value is None else repr(value)


def _short(value: Optional[float]) -> str:
    return "null" if value is None else f"{value:.4f}"


def _stamp(ctx: RunContext, command: str, out: Path):
    write_provenance(out, version_stamp(ctx.config, command))


class PipelineGroup(click.Group):
    """
    Turns FloorspaceError into a JSON error line and the family's exit code

    A missing file surfaces as MissingInputError; any other unexpected
    exception as InternalError, with the traceback logged at debug level.
    """

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except FloorspaceError as e:
            error = e
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except FileNotFoundError as e:
            error = MissingInputError(f"input not found: {e.filename}")
        except Exception as e:
            logger.debug("unexpected failure", exc_info=True)
            error = InternalError.wrap(e)
        _emit(error)
        ctx.exit(error.exit_code)


@click.group(cls=PipelineGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="key=value configuration file")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one config key")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker cap (default: all cores)")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], overrides: List[str], threads: Optional[int], verbose: bool):
    """Building footprint and height pipeline"""
    _configure_logging(ctx, verbose)
    config = load_config(config_path, parse_overrides(overrides))
    threads = threads or os.cpu_count() or 1
    torch.set_num_threads(threads)
    ctx.obj = RunContext(config=config, threads=threads, progress=sys.stderr.isatty())


@cli.command("composite")
@click.option("--s1", "s1_list", required=True, help="Sentinel-1 scene list")
@click.option("--s2", "s2_list", required=True, help="Sentinel-2 scene list (with cloud probability)")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def composite_cmd(ctx: RunContext, s1_list: str, s2_list: str, out: str):
    """Cloud-masked temporal composites stacked to 6 bands"""
    cfg = ctx.config
    s1 = composite(read_scene_list(s1_list), cfg.scene_cloud_limit, cfg.pixel_cloud_threshold)
    s2 = composite(read_scene_list(s2_list), cfg.scene_cloud_limit, cfg.pixel_cloud_threshold)
    stack = stack_bands(s1, s2)
    out_dir = Path(out)
    write_fsr(stack.raster, out_dir / "stack.fsr")
    _stamp(ctx, "composite", out_dir)
    click.echo(f"✅ composite: {stack.raster.width}x{stack.raster.height} 6-band stack -> {out_dir / 'stack.fsr'}")


@cli.command("rasterize")
@click.option("--buildings", required=True, help="GeoJSON building polygons with a height property")
@click.option("--grid", required=True, help="Any FSR1 raster defining the target grid")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def rasterize_cmd(ctx: RunContext, buildings: str, grid: str, out: str):
    """Burn building polygons into mask.fsr and height.fsr"""
    if not Path(buildings).exists():
        raise MissingInputError(f"input not found: {buildings}")
    target = _read(grid)
    labels = rasterize(load_polygons(buildings), target.transform, target.width, target.height, ctx.threads)
    out_dir = Path(out)
    write_fsr(labels.mask, out_dir / "mask.fsr")
    write_fsr(labels.height_m, out_dir / "height.fsr")
    _stamp(ctx, "rasterize", out_dir)
    click.echo(f"✅ rasterize: {int(labels.mask.data.sum())} building cells -> {out_dir}")


@cli.command("tile")
@click.option("--stack", "stack_path", required=True, help="Raw 6-band stack (FSR1)")
@click.option("--labels", required=True, help="Directory with mask.fsr and height.fsr")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def tile_cmd(ctx: RunContext, stack_path: str, labels: str, out: str):
    """Tile, filter, split and standardize a mosaic"""
    cfg = ctx.config
    tileset = build_tileset(
        BandStack(_read(stack_path)),
        _read_labels(labels),
        cfg.tile_size,
        cfg.min_building_fraction,
        cfg.val_ratio,
        cfg.seed,
        cfg.normalizer(),
        cfg.city,
    )
    stamp = version_stamp(cfg, "tile")
    tileset.manifest.provenance = stamp
    out_dir = Path(out)
    save_tileset(tileset, out_dir, progress=ctx.progress)
    write_provenance(out_dir, stamp)
    click.echo(f"✅ tile: {len(tileset.train)} train / {len(tileset.val)} val tiles -> {out_dir}")


@cli.command("train")
@click.option("--tiles", required=True, help="Tile set directory")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--sweep", is_flag=True, help="Sweep the height task coefficient grid")
@click.option("--stage1", default=None, help="Footprint checkpoint for a two-stage height model")
@click.option("--compose", type=click.Choice(["A1", "A2", "A3"]), default=None)
@click.pass_obj
def train_cmd(ctx: RunContext, tiles: str, out: str, sweep: bool, stage1: Optional[str], compose: Optional[str]):
    """Train a model; writes model.fsm and history.csv"""
    cfg = ctx.config
    if (stage1 is None) != (compose is None):
        raise ConfigError("--stage1 and --compose must be given together")
    if sweep and stage1:
        raise ConfigError("--sweep cannot be combined with two-stage training")

    tileset = load_tileset(tiles)
    train_cfg = cfg.training()
    in_channels = len(BAND_SETS[cfg.band_set])
    out_dir = Path(out)

    if sweep:
        entries, best = sweep_task_coefficients(
            tileset, cfg.network(in_channels), train_cfg, model_seed=cfg.seed, progress=ctx.progress
        )
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "sweep.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["coefficient", "val_dice", "val_h"])
            for e in entries:
                writer.writerow([repr(e.coefficient), _cell(e.val_dice), _cell(e.val_h)])
        model, history = entries[best].model, entries[best].history
        model.meta = checkpoint_meta(tileset.manifest, cfg.band_set)
        model.meta["height_weight"] = entries[best].coefficient
        summary = f"best height coefficient {entries[best].coefficient:g}"
    elif stage1:
        first = load_model(stage1)
        build, stage2_config = compose_two_stage(first, compose, cfg.network(in_channels))
        model = FloorspaceModel(stage2_config, seed=cfg.seed, meta=checkpoint_meta(tileset.manifest, cfg.band_set, compose))
        history = train_model(model, tileset, train_cfg, input_transform=build, progress=ctx.progress).history
        summary = f"two-stage {compose} height model"
    else:
        model = FloorspaceModel(cfg.network(in_channels), seed=cfg.seed,
                                meta=checkpoint_meta(tileset.manifest, cfg.band_set))
        history = train_model(model, tileset, train_cfg, progress=ctx.progress).history
        summary = f"{cfg.head} model"

    save_model(model, out_dir / "model.fsm")
    write_history_csv(history, out_dir / "history.csv")
    _stamp(ctx, "train", out_dir)
    last = history[-1]
    dice = _short(last.val_dice)
    click.echo(f"✅ train: {summary}, {len(history)} epochs, final val dice {dice} -> {out_dir}")


@cli.command("predict")
@click.option("--model", "model_path", required=True, help="FSM1 checkpoint (stage 2 when --stage1 is given)")
@click.option("--stack", "stack_path", required=True, help="Raw 6-band stack (FSR1)")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--stage1", default=None, help="Footprint checkpoint of a two-stage pair")
@click.pass_obj
def predict_cmd(ctx: RunContext, model_path: str, stack_path: str, out: str, stage1: Optional[str]):
    """Predict probability.fsr, mask.fsr and height.fsr over a mosaic"""
    cfg = ctx.config
    if not Path(model_path).exists():
        raise MissingInputError(f"input not found: {model_path}")
    model = load_model(model_path)
    stack = BandStack(_read(stack_path))
    if stage1:
        if not Path(stage1).exists():
            raise MissingInputError(f"input not found: {stage1}")
        prediction = predict_two_stage(load_model(stage1), model, stack, cfg.tile_size,
                                       cfg.footprint_threshold, ctx.progress)
    else:
        prediction = predict(model, stack, cfg.tile_size, cfg.footprint_threshold, ctx.progress)

    out_dir = Path(out)
    write_fsr(prediction.probability, out_dir / "probability.fsr")
    write_fsr(prediction.mask, out_dir / "mask.fsr")
    write_fsr(prediction.height_m, out_dir / "height.fsr")
    _stamp(ctx, "predict", out_dir)
    click.echo(f"✅ predict: {int(prediction.mask.data.sum())} building pixels -> {out_dir}")


def _trust(path: Optional[str]) -> Optional[Raster]:
    return _read(path) if path else None


@cli.command("eval")
@click.option("--pred", required=True, help="Prediction directory (mask.fsr, height.fsr)")
@click.option("--ref", required=True, help="Reference directory (mask.fsr, height.fsr)")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--trust", default=None, help="Optional uint8 trust mask (FSR1)")
@click.pass_obj
def eval_cmd(ctx: RunContext, pred: str, ref: str, out: str, trust: Optional[str]):
    """Footprint and height metrics; writes metrics.json/.csv and histograms"""
    cfg = ctx.config
    pred_dir = Path(pred)
    pred_mask = _read(str(pred_dir / "mask.fsr"))
    pred_h = _read(str(pred_dir / "height.fsr"))
    reference = _read_labels(ref)
    if not (pred_mask.same_grid(reference.mask) and pred_h.same_grid(reference.mask)):
        raise AlignmentError("prediction and reference do not share the grid")

    validity = np.ones((reference.mask.height, reference.mask.width), dtype=bool)
    if (pred_dir / "probability.fsr").exists():
        validity &= read_fsr(pred_dir / "probability.fsr").valid_mask()[0]
    trust_mask = _trust(trust)
    if trust_mask is not None:
        validity &= trust_mask.data[0] > 0

    report = evaluate(
        pred_mask.data[0], pred_h.data[0], reference.mask.data[0], reference.height_m.data[0],
        validity=validity,
        classes=cfg.storey_classes(),
        bin_width_m=cfg.hist_bin_width_m,
        cap_m=cfg.hist_cap_m,
    )
    out_dir = Path(out)
    write_report_json(report, out_dir / "metrics.json")
    write_report_csv(report, out_dir / "metrics.csv")
    write_histogram_csv(report.histogram_ref, out_dir / "hist_ref.csv")
    write_histogram_csv(report.histogram_pred, out_dir / "hist_pred.csv")
    _stamp(ctx, "eval", out_dir)
    click.echo(
        f"✅ eval: dice {_short(report.dice)}, MAE {_short(report.mae_m)} m, "
        f"MRE {_short(report.mre_overall)} -> {out_dir}"
    )


@cli.command("aggregate")
@click.option("--pred", required=True, help="Prediction directory (height.fsr)")
@click.option("--ref", required=True, help="Reference directory (height.fsr)")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--trust", default=None, help="Optional uint8 trust mask (FSR1)")
@click.pass_obj
def aggregate_cmd(ctx: RunContext, pred: str, ref: str, out: str, trust: Optional[str]):
    """R^2 versus cell size (r2_curve.csv) and the log scatter (scatter.csv)"""
    cfg = ctx.config
    pred_h = _read(str(Path(pred) / "height.fsr"))
    ref_h = _read(str(Path(ref) / "height.fsr"))
    trust_mask = _trust(trust)
    curve = r2_curve(pred_h, ref_h, cfg.aggregation(), trust_mask, workers=ctx.threads)
    points = scatter_export(pred_h, ref_h, cfg.scatter_side_m, cfg.min_valid_fraction, trust_mask, cfg.building_only)

    out_dir = Path(out)
    write_curve_csv(curve, out_dir / "r2_curve.csv")
    write_scatter_csv(points, out_dir / "scatter.csv")
    _stamp(ctx, "aggregate", out_dir)
    defined = [p for p in curve if p.r2 is not None]
    first = f"{defined[0].r2:.3f} at {defined[0].side_length_m:g} m" if defined else "undefined"
    click.echo(f"✅ aggregate: {len(curve)} scales (R^2 {first}), {len(points)} scatter cells -> {out_dir}")


@cli.command("ntl")
@click.option("--pred", required=True, help="Prediction directory (height.fsr)")
@click.option("--ntl", "ntl_path", default=None, help="Nightlight raster (FSR1, single band)")
@click.option("--ref", default=None, help="Reference directory (height.fsr) for prediction vs reference")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--trust", default=None, help="Optional uint8 trust mask on the height grid")
@click.pass_obj
def ntl_cmd(ctx: RunContext, pred: str, ntl_path: Optional[str], ref: Optional[str], out: str, trust: Optional[str]):
    """Scale fits and log-difference maps against nightlights and/or the reference"""
    if ntl_path is None and ref is None:
        raise ConfigError("ntl needs --ntl, --ref or both")
    cfg = ctx.config.ntl()
    pred_h = _read(str(Path(pred) / "height.fsr"))
    trust_mask = _trust(trust)
    out_dir = Path(out)
    parts = []

    if ntl_path is not None:
        lights = _read(ntl_path)
        cells = align_to_ntl(pred_h, lights, trust_mask)
        diff, fit = log_diff_map(cells, Raster(lights.data[:1].astype(np.float32), lights.transform,
                                               lights.nodata), cfg)
        write_fsr(cells, out_dir / "pred_ntl.fsr")
        write_fsr(diff, out_dir / "ntl_logdiff.fsr")
        write_fit_json(fit, out_dir / "ntl_fit.json")
        parts.append(f"NTL r={_short(fit.pearson_r)}")

    if ref is not None:
        ref_h = _read(str(Path(ref) / "height.fsr"))
        grid = _read(ntl_path) if ntl_path is not None else ntl_grid_like(ref_h, cfg.cell_m)
        pred_cells = align_to_ntl(pred_h, grid, trust_mask)
        ref_cells = align_to_ntl(ref_h, grid, trust_mask)
        diff, fit = log_diff_map(pred_cells, ref_cells, cfg)
        write_fsr(ref_cells, out_dir / "ref_cells.fsr")
        write_fsr(diff, out_dir / "ref_logdiff.fsr")
        write_fit_json(fit, out_dir / "ref_fit.json")
        parts.append(f"reference r={_short(fit.pearson_r)}")

    _stamp(ctx, "ntl", out_dir)
    click.echo(f"✅ ntl: {', '.join(parts)} -> {out_dir}")


@cli.command("render")
@click.option("--raster", "raster_path", required=True, help="Single-band FSR1 raster")
@click.option("--palette", type=click.Choice(sorted(PALETTES)), default="diverging")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output .ppm path")
@click.pass_obj
def render_cmd(ctx: RunContext, raster_path: str, palette: str, out: str):
    """Render a map as binary PPM plus a .txt sidecar"""
    result = render_map(_read(raster_path), palette, out)
    _stamp(ctx, "render", result.path.parent)
    click.echo(f"✅ render: {palette} map {result.low:.4g}..{result.high:.4g} -> {result.path}")


@cli.command("gradcheck")
@click.option("--out", default=None, type=click.Path(file_okay=False), help="Optional report directory")
@click.pass_obj
def gradcheck_cmd(ctx: RunContext, out: Optional[str]):
    """Finite-difference check of the multi-task loss gradients (float64)"""
    cfg = ctx.config
    config = ModelConfig(
        in_channels=len(BAND_SETS[cfg.band_set]),
        depth=cfg.gradcheck_depth,
        base_channels=cfg.gradcheck_base_channels,
        head="multitask",
    )
    model = FloorspaceModel(config, seed=cfg.seed)
    batch = random_batch(config, cfg.gradcheck_batch, cfg.gradcheck_tile, cfg.seed)
    report = gradient_check(model, batch, cfg.training(), cfg.gradcheck_step, cfg.gradcheck_samples, cfg.seed)

    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "gradcheck.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["parameter", "max_rel_error", "checked", "required", "skipped", "refined"])
            for name, group in iter_parameter_groups(report):
                writer.writerow([name, repr(group.max_rel_error), group.checked, group.required, group.skipped,
                                 group.refined])
        _stamp(ctx, "gradcheck", out_dir)

    failures = report.failures(cfg.gradcheck_tolerance)
    if failures:
        raise GradientCheckFailed(
            f"{len(failures)} of {len(report.groups)} groups failed: "
            + "; ".join(f"{name}: {reason}" for name, reason in failures.items())
        )
    click.echo(f"✅ gradcheck: max relative error {report.max_rel_error:.3e} over {len(report.groups)} groups")


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return its exit code"""
    try:
        rv = cli.main(args=argv, prog_name="floorspace", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        click.echo(json.dumps({"error": "UsageError", "code": USAGE_EXIT_CODE, "message": e.format_message()}),
                   err=True)
        return USAGE_EXIT_CODE
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        return 1
    return rv if isinstance(rv, int) else 0
