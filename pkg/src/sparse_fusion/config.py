"""Run configuration: pipeline knobs, scene generation and mask noise, stored as one JSON document."""

import math
import os
import typing as t
from dataclasses import dataclass, field, fields, replace

from .camera_query import FAR_CLIP_FACTOR, FrustumParams
from .eval_bench import DEFAULT_THRESHOLDS
from .exceptions import ConstraintViolationError, MalformedInputError
from .geom3d import Vec3
from .scene_synth import MaskNoise, SceneConfig, default_camera_rig
from .serialization import (
    SCHEMA_VERSION,
    PathLike,
    as_list,
    camera_from_dict,
    camera_to_dict,
    class_spec_from_dict,
    class_spec_to_dict,
    fixed_object_from_dict,
    fixed_object_to_dict,
    read_document,
    write_document,
)


SEED_ENV: str = "SPARSE_FUSION_SEED"
ASSIGNMENT_MODES: t.Tuple[str, ...] = ("two_round", "query_in_box")
RIG_KEYS: t.Tuple[str, ...] = ("n_cameras", "image_w", "image_h", "focal_px", "height_m")


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the detection pipeline; constructing one validates it."""

    voxel_size: Vec3 = (0.2, 0.2, 0.2)
    connect_radius_m: float = 0.5
    min_cluster_points: int = 2
    fg_threshold: float = 0.5
    flip_prob: float = 0.0
    vote_sigma_m: float = 0.0
    depth_min_m: float = 0.5
    depth_max_m: t.Optional[float] = None
    score_floor: float = 1e-3
    iou2d_threshold: float = 0.5
    dedup_dist_m: float = 1.0
    eval_thresholds_m: t.Tuple[float, ...] = DEFAULT_THRESHOLDS
    seed: int = 0
    use_lidar_queries: bool = True
    use_camera_queries: bool = True
    align_queries: bool = True
    align_iterations: int = 4
    shape_prior: bool = True
    min_fit_points: int = 3
    lidar_score_bonus: float = 0.9
    camera_score_bonus: float = 1.0
    assignment: str = "two_round"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "eval_thresholds_m", tuple(float(v) for v in self.eval_thresholds_m))
        self.validate()

    def validate(self) -> "PipelineConfig":
        def fail(name: str, rule: str) -> t.NoReturn:
            raise ConstraintViolationError(f"pipeline.{name} {rule}, got {getattr(self, name)!r}")

        if len(self.voxel_size) != 3 or not all(math.isfinite(v) and v > 0 for v in self.voxel_size):
            fail("voxel_size", "must be 3 positive values")
        for name in ("connect_radius_m", "score_floor", "dedup_dist_m"):
            if not math.isfinite(getattr(self, name)) or getattr(self, name) <= 0:
                fail(name, "must be positive")
        for name in ("fg_threshold", "flip_prob", "iou2d_threshold", "focal_alpha"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                fail(name, "must be in [0, 1]")
        for name in ("vote_sigma_m", "focal_gamma", "lidar_score_bonus", "camera_score_bonus"):
            if not math.isfinite(getattr(self, name)) or getattr(self, name) < 0:
                fail(name, "must be >= 0")
        for name in ("min_cluster_points", "align_iterations", "min_fit_points"):
            if isinstance(getattr(self, name), bool) or int(getattr(self, name)) != getattr(self, name):
                fail(name, "must be an integer")
            if getattr(self, name) < 1:
                fail(name, "must be >= 1")
        if not math.isfinite(self.depth_min_m) or self.depth_min_m <= 0:
            fail("depth_min_m", "must be positive")
        if self.depth_max_m is not None and not self.depth_max_m > self.depth_min_m:
            fail("depth_max_m", "must exceed depth_min_m")
        thresholds = self.eval_thresholds_m
        if not thresholds or not all(math.isfinite(v) and v > 0 for v in thresholds):
            fail("eval_thresholds_m", "must be a non-empty list of positive distances")
        if list(thresholds) != sorted(thresholds):
            fail("eval_thresholds_m", "must be sorted ascending")
        if isinstance(self.seed, bool) or int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            fail("seed", "must be an integer in [0, 2**64)")
        if self.assignment not in ASSIGNMENT_MODES:
            fail("assignment", f"must be one of {', '.join(ASSIGNMENT_MODES)}")
        if not (self.use_lidar_queries or self.use_camera_queries):
            raise ConstraintViolationError("pipeline.use_lidar_queries and pipeline.use_camera_queries are both off")
        return self

    def frustum(self, range_m: float) -> FrustumParams:
        """Frustum depth bounds; the far bound defaults to a margin beyond the scene range."""
        depth_max = self.depth_max_m if self.depth_max_m is not None else FAR_CLIP_FACTOR * range_m
        return FrustumParams(depth_min_m=self.depth_min_m, depth_max_m=depth_max, score_floor=self.score_floor)


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs to reproduce a run."""

    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    mask_noise: MaskNoise = field(default_factory=MaskNoise)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, pipeline=replace(self.pipeline, seed=seed), scene=replace(self.scene, seed=seed))


def _coerce(section: str, name: str, value: t.Any, default: t.Any) -> t.Any:
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise MalformedInputError(f"field '{where}' must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise MalformedInputError(f"field '{where}' must be an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise MalformedInputError(f"field '{where}' must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        items = as_list(value, where)
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in items):
            raise MalformedInputError(f"field '{where}' must be a list of numbers, got {value!r}")
        return tuple(float(v) for v in items)
    if value is None and default is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedInputError(f"field '{where}' must be a number, got {value!r}")
    return float(value)


def _section(document: t.Mapping[str, t.Any], name: str) -> t.Dict[str, t.Any]:
    value = document.get(name, {})
    if not isinstance(value, dict):
        raise MalformedInputError(f"field '{name}' must be an object")
    return dict(value)


def _reject_unknown(section: str, given: t.Iterable[str], known: t.Iterable[str]) -> None:
    unknown = sorted(set(given) - set(known))
    if unknown:
        raise MalformedInputError(f"unknown field '{section}.{unknown[0]}'")


def _plain_fields(
    cls: t.Any, section: str, values: t.Dict[str, t.Any], skip: t.Container[str] = ()
) -> t.Dict[str, t.Any]:
    defaults = cls()
    kwargs: t.Dict[str, t.Any] = {}
    for f in fields(cls):
        if f.name in skip or f.name not in values:
            continue
        kwargs[f.name] = _coerce(section, f.name, values[f.name], getattr(defaults, f.name))
    return kwargs


def pipeline_config_from_dict(values: t.Dict[str, t.Any]) -> PipelineConfig:
    _reject_unknown("pipeline", values, (f.name for f in fields(PipelineConfig)))
    return PipelineConfig(**_plain_fields(PipelineConfig, "pipeline", values))


def scene_config_from_dict(values: t.Dict[str, t.Any]) -> SceneConfig:
    special = ("cameras", "rig", "classes", "fixed_objects")
    _reject_unknown("scene", values, [f.name for f in fields(SceneConfig)] + ["rig"])
    kwargs = _plain_fields(SceneConfig, "scene", values, skip=special)
    if "cameras" in values and "rig" in values:
        raise MalformedInputError("fields 'scene.cameras' and 'scene.rig' are mutually exclusive")
    if "cameras" in values:
        kwargs["cameras"] = tuple(
            camera_from_dict(c, f"scene.cameras[{i}]")
            for i, c in enumerate(as_list(values["cameras"], "scene.cameras"))
        )
    elif "rig" in values:
        rig = values["rig"]
        if not isinstance(rig, dict):
            raise MalformedInputError("field 'scene.rig' must be an object")
        _reject_unknown("scene.rig", rig, RIG_KEYS)
        rig_defaults = dict(zip(RIG_KEYS, (6, 480, 270, 240.0, 1.8)))
        kwargs["cameras"] = default_camera_rig(
            **{k: _coerce("scene.rig", k, v, rig_defaults[k]) for k, v in rig.items()}
        )
    if "classes" in values:
        kwargs["classes"] = tuple(
            class_spec_from_dict(c, f"scene.classes[{i}]")
            for i, c in enumerate(as_list(values["classes"], "scene.classes"))
        )
    if "fixed_objects" in values:
        kwargs["fixed_objects"] = tuple(
            fixed_object_from_dict(o, f"scene.fixed_objects[{i}]")
            for i, o in enumerate(as_list(values["fixed_objects"], "scene.fixed_objects"))
        )
    return SceneConfig(**kwargs)


def mask_noise_from_dict(values: t.Dict[str, t.Any]) -> MaskNoise:
    _reject_unknown("mask_noise", values, (f.name for f in fields(MaskNoise)))
    return MaskNoise(**_plain_fields(MaskNoise, "mask_noise", values))


def config_from_dict(document: t.Mapping[str, t.Any]) -> RunConfig:
    _reject_unknown("config", document, ("schema_version", "kind", "pipeline", "scene", "mask_noise"))
    return RunConfig(
        pipeline=pipeline_config_from_dict(_section(document, "pipeline")),
        scene=scene_config_from_dict(_section(document, "scene")),
        mask_noise=mask_noise_from_dict(_section(document, "mask_noise")),
    )


def config_to_dict(config: RunConfig) -> t.Dict[str, t.Any]:
    pipeline = {f.name: getattr(config.pipeline, f.name) for f in fields(PipelineConfig)}
    scene = {
        f.name: getattr(config.scene, f.name)
        for f in fields(SceneConfig)
        if f.name not in ("cameras", "classes", "fixed_objects")
    }
    scene["cameras"] = [camera_to_dict(c) for c in config.scene.cameras]
    scene["classes"] = [class_spec_to_dict(c) for c in config.scene.classes]
    scene["fixed_objects"] = [fixed_object_to_dict(o) for o in config.scene.fixed_objects]
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "config",
        "pipeline": pipeline,
        "scene": scene,
        "mask_noise": {f.name: getattr(config.mask_noise, f.name) for f in fields(MaskNoise)},
    }


def load_config(path: t.Optional[PathLike] = None) -> RunConfig:
    """Read a config file; with no path, the defaults."""
    if path is None:
        return RunConfig()
    document = read_document(path)
    if document.get("kind", "config") != "config":
        raise MalformedInputError(f"{path}: field 'kind' must be 'config', got {document.get('kind')!r}")
    return config_from_dict(document)


def save_config(config: RunConfig, path: PathLike) -> None:
    write_document(config_to_dict(config), path)


def resolve_seed(cli_seed: t.Optional[int], config_seed: int = 0) -> int:
    """``SPARSE_FUSION_SEED`` beats ``--seed``, which beats the config file."""
    raw = os.environ.get(SEED_ENV)
    if raw is not None and raw.strip():
        try:
            seed = int(raw.strip(), 10)
        except ValueError as err:
            raise MalformedInputError(f"environment variable {SEED_ENV} must be an integer, got {raw!r}") from err
    elif cli_seed is not None:
        seed = cli_seed
    else:
        seed = config_seed
    if not 0 <= seed < 2**64:
        raise ConstraintViolationError(f"seed must be in [0, 2**64), got {seed}")
    return seed
