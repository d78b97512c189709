"""The command line interface of SparseFusion."""

import os
import sys
import typing as t
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import click
from tabulate import tabulate
from tqdm import tqdm, trange

from . import SparseFusion
from . import __version__ as package_version
from .click_utils import (
    OptionEatAll,
    parse_positive_floats,
    parse_range_bins,
    validate_positive_integer,
    validate_seed,
)
from .config import RunConfig, load_config, resolve_seed
from .debug_info import info
from .eval_bench import (
    cost_scan,
    evaluate,
    evaluate_by_range,
    format_cost_table,
    format_eval_table,
    write_cost_csv,
)
from .exceptions import MalformedInputError, SparseFusionError
from .refine import Detection
from .scene_synth import GroundTruth, degrade_scene, derive_seed, generate_scene
from .serialization import (
    DETECTIONS_SUFFIX,
    SCHEMA_VERSION,
    DetectionFile,
    list_documents,
    load_detections,
    load_scene,
    output_name,
    save_detections,
    save_scene,
    write_document,
)


_header: str = f"sparsefusion version {package_version}"

PathLike = t.Union[str, "os.PathLike[t.Any]"]


@contextmanager
def _handle_errors(debug: bool) -> t.Iterator[None]:
    try:
        yield
    except KeyboardInterrupt:
        if debug:
            raise
        click.echo("\nProcess interrupted. Exiting...")
        sys.exit(1)
    except SparseFusionError as err:
        if debug:
            raise
        click.echo(f"Error: {err}", err=True)
        sys.exit(err.exit_code)
    except Exception as err:  # pylint: disable=W0703
        if debug:
            raise
        click.echo(err, err=True)
        sys.exit(1)


def _run_config(
    config: t.Optional[PathLike], seed: t.Optional[int], config_seed: t.Callable[[RunConfig], int]
) -> RunConfig:
    run = load_config(config)
    return run.with_seed(resolve_seed(seed, config_seed(run)))


def _detector(run: RunConfig, log_file: t.Optional[PathLike], quiet: bool) -> SparseFusion:
    return SparseFusion(config=run.pipeline, classes=run.scene.classes, log_file=log_file, quiet=quiet)


def _scene_name(path: Path) -> str:
    return output_name(path, "")


def common_options(func: t.Callable[..., t.Any]) -> t.Callable[..., t.Any]:
    """Options every command shares."""
    for option in reversed(
        (
            click.option("-c", "--config", type=click.Path(), default=None, help="JSON config file."),
            click.option(
                "--seed",
                type=int,
                default=None,
                callback=validate_seed,
                help="Root seed. The SPARSE_FUSION_SEED environment variable takes precedence.",
            ),
            click.option("-l", "--log-file", type=click.Path(), help="Log file"),
            click.option("-q", "--quiet", is_flag=True, help="Quiet. Display only errors."),
            click.option("--debug", is_flag=True, help="Debug mode. Will throw exceptions."),
        )
    ):
        func = option(func)
    return func


@click.group(name="sparsefusion", help=_header, no_args_is_help=True)
@click.version_option(message=tabulate(info(), headers=["software", "version"], tablefmt="github"))
def cli() -> None:
    """Fully sparse LiDAR and camera fusion detector."""


@cli.command()
@common_options
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True, help="Output directory for scenes.")
@click.option(
    "-n",
    "--n-scenes",
    type=int,
    default=1,
    show_default=True,
    callback=validate_positive_integer,
    help="Number of scenes to generate.",
)
def synth(
    config: t.Optional[PathLike],
    seed: t.Optional[int],
    log_file: t.Optional[PathLike],
    quiet: bool,
    debug: bool,
    out: PathLike,
    n_scenes: int,
) -> None:
    """Generate synthetic scenes."""
    if not quiet:
        click.echo(_header)
    with _handle_errors(debug):
        run = _run_config(config, seed, lambda r: r.scene.seed)
        logger = _detector(run, log_file, quiet).logger
        os.makedirs(out, exist_ok=True)
        for index in trange(n_scenes, disable=quiet, desc="synth"):
            scene = generate_scene(replace(run.scene, seed=derive_seed(run.scene.seed, index)))
            scene = degrade_scene(scene, run.mask_noise)
            save_scene(scene, Path(out) / f"scene-{index:05d}.json")
        logger.info("wrote %d scenes to %s", n_scenes, out)


@cli.command()
@common_options
@click.option("-s", "--scenes", type=click.Path(file_okay=False), required=True, help="Directory of scene files.")
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True, help="Output directory for detections.")
def detect(
    config: t.Optional[PathLike],
    seed: t.Optional[int],
    log_file: t.Optional[PathLike],
    quiet: bool,
    debug: bool,
    scenes: PathLike,
    out: PathLike,
) -> None:
    """Run the detector on every scene and write one detection file per scene."""
    if not quiet:
        click.echo(_header)
    with _handle_errors(debug):
        run = _run_config(config, seed, lambda r: r.pipeline.seed)
        detector = _detector(run, log_file, quiet)
        paths = list_documents(scenes)
        os.makedirs(out, exist_ok=True)
        for path in tqdm(paths, disable=quiet, desc="detect"):
            scene = load_scene(path)
            result = detector.detect(scene)
            save_detections(
                DetectionFile(
                    scene=_scene_name(path),
                    seed=scene.seed,
                    detections=result.detections,
                    stage_counts=result.stage_counts,
                ),
                Path(out) / output_name(path, DETECTIONS_SUFFIX),
            )


@cli.command()
@common_options
@click.option("-s", "--scenes", type=click.Path(file_okay=False), required=True, help="Directory of scene files.")
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None, help="Also write the tables as JSON.")
def assign(
    config: t.Optional[PathLike],
    seed: t.Optional[int],
    log_file: t.Optional[PathLike],
    quiet: bool,
    debug: bool,
    scenes: PathLike,
    out: t.Optional[PathLike],
) -> None:
    """Print the assignment of every query of every scene."""
    with _handle_errors(debug):
        run = _run_config(config, seed, lambda r: r.pipeline.seed)
        detector = _detector(run, log_file, quiet)
        tables: t.Dict[str, t.List[t.Dict[str, t.Any]]] = {}
        for path in list_documents(scenes):
            scene = load_scene(path)
            result = detector.detect(scene)
            generation, refinement = detector.assign(scene, result)
            rows = [
                {
                    "query": index,
                    "modality": query.modality.value,
                    "gt": generation.gt_index[index],
                    "round": generation.rounds[index].value,
                    "refined_gt": refinement.gt_index[index],
                    "refined_round": refinement.rounds[index].value,
                }
                for index, query in enumerate(result.queries)
            ]
            tables[_scene_name(path)] = rows
            if not quiet:
                click.echo(f"\n{_scene_name(path)}")
                click.echo(tabulate(rows, headers="keys", tablefmt="github"))
        if out:
            write_document({"schema_version": SCHEMA_VERSION, "kind": "assignments", "scenes": tables}, out)


@cli.command(name="eval")
@click.option("-d", "--detections", type=click.Path(file_okay=False), required=True, help="Detection directory.")
@click.option("-s", "--scenes", type=click.Path(file_okay=False), required=True, help="Directory of scene files.")
@click.option(
    "-t",
    "--thresholds",
    type=tuple,
    cls=OptionEatAll,
    callback=parse_positive_floats,
    help="Center distance thresholds in meters (space separated). Defaults to the config's thresholds.",
)
@click.option(
    "--range-bins",
    type=tuple,
    cls=OptionEatAll,
    callback=parse_range_bins,
    help="Also evaluate per ego distance bin, e.g. 0:50 50:100.",
)
@click.option("-c", "--config", type=click.Path(), default=None, help="JSON config file.")
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None, help="Write the report as JSON.")
@click.option("-q", "--quiet", is_flag=True, help="Quiet. Display only errors.")
@click.option("--debug", is_flag=True, help="Debug mode. Will throw exceptions.")
def evaluate_command(
    detections: PathLike,
    scenes: PathLike,
    thresholds: t.Optional[t.Tuple[float, ...]],
    range_bins: t.Optional[t.Tuple[t.Tuple[float, float], ...]],
    config: t.Optional[PathLike],
    out: t.Optional[PathLike],
    quiet: bool,
    debug: bool,
) -> None:
    """Score detection files against the ground truth of their scenes."""
    with _handle_errors(debug):
        run = load_config(config)
        by_scene = {d.scene: d for d in (load_detections(p) for p in list_documents(detections, DETECTIONS_SUFFIX))}
        scene_paths = list_documents(scenes)
        all_detections: t.List[t.List[Detection]] = []
        all_gts: t.List[t.List[GroundTruth]] = []
        class_names: t.Dict[int, str] = {}
        for path in scene_paths:
            name = _scene_name(path)
            if name not in by_scene:
                raise MalformedInputError(f"no detection file for scene '{name}' in {detections}")
            scene = load_scene(path)
            class_names.update({c.class_id: c.name for c in scene.classes})
            all_detections.append(list(by_scene[name].detections))
            all_gts.append(list(scene.gt))
        dist_thresholds = thresholds or run.pipeline.eval_thresholds_m
        result = evaluate(all_detections, all_gts, sorted(dist_thresholds))
        report: t.Dict[str, t.Any] = {"schema_version": SCHEMA_VERSION, "kind": "eval", "overall": result.as_dict()}
        if not quiet:
            click.echo(format_eval_table(result, class_names))
        if range_bins:
            by_range = evaluate_by_range(all_detections, all_gts, sorted(dist_thresholds), range_bins)
            report["by_range"] = {f"{low:g}-{high:g}": r.as_dict() for (low, high), r in by_range.items()}
            if not quiet:
                for (low, high), binned in by_range.items():
                    click.echo(f"\n{low:g} - {high:g} m")
                    click.echo(format_eval_table(binned, class_names))
        if out:
            write_document(report, out)


@cli.command()
@common_options
@click.option(
    "-r",
    "--ranges",
    type=tuple,
    cls=OptionEatAll,
    callback=parse_positive_floats,
    help="Scene ranges in meters (space separated). Defaults to 54 100 200.",
)
@click.option("--cell-m", type=float, default=0.2, show_default=True, help="Dense BEV cell size in meters.")
@click.option("--channels", type=int, default=64, show_default=True, help="Dense BEV feature channels.")
@click.option("--repeats", type=int, default=5, show_default=True, help="Timed runs per range.")
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None, help="Write the reports as CSV.")
@click.option("--json", "json_out", type=click.Path(dir_okay=False), default=None, help="Write the reports as JSON.")
def bench(
    config: t.Optional[PathLike],
    seed: t.Optional[int],
    log_file: t.Optional[PathLike],
    quiet: bool,
    debug: bool,
    ranges: t.Optional[t.Tuple[float, ...]],
    cell_m: float,
    channels: int,
    repeats: int,
    out: t.Optional[PathLike],
    json_out: t.Optional[PathLike],
) -> None:
    """Compare the dense BEV cost with the measured sparse pipeline cost over scene ranges."""
    with _handle_errors(debug):
        run = _run_config(config, seed, lambda r: r.scene.seed)
        detector = _detector(run, log_file, True)
        reports = cost_scan(
            ranges or (54.0, 100.0, 200.0),
            cell_m=cell_m,
            channels=channels,
            template=run.scene,
            detector=detector,
            repeats=repeats,
        )
        if not quiet:
            click.echo(format_cost_table(reports))
        if out:
            write_cost_csv(reports, out)
        if json_out:
            write_document(
                {"schema_version": SCHEMA_VERSION, "kind": "cost", "reports": [r.as_dict() for r in reports]}, json_out
            )

