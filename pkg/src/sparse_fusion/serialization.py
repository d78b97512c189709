"""JSON documents for scenes, detections and reports.

Floats are written with 17 significant digits, so reading a document back restores every value bit for bit.
Keys are sorted and files end with a newline, so repeated runs write identical bytes.
"""

import math
import os
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt
import simplejson as json
from slugify import slugify

from .exceptions import ConstraintViolationError, MalformedInputError
from .geom3d import Box2, Box3, CameraModel
from .query import Modality
from .refine import Detection
from .scene_synth import ClassSpec, FixedObject, GroundTruth, InstanceMask, Scene


SCHEMA_VERSION: int = 1
SCENE_SUFFIX = ".json"
DETECTIONS_SUFFIX = ".detections.json"

PathLike = t.Union[str, "os.PathLike[t.Any]"]
Document = t.Dict[str, t.Any]


def raw_float(value: float) -> json.RawJSON:
    value = float(value)
    if not math.isfinite(value):
        raise ConstraintViolationError(f"cannot serialise non-finite value {value!r}")
    return json.RawJSON(format(value, ".17g"))


def jsonable(value: t.Any) -> t.Any:
    """Recursively convert floats (numpy included) to exact literals and tuples to lists."""
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return raw_float(float(value))
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    return value


def dumps(document: t.Any, compact: bool = False) -> str:
    if compact:
        return json.dumps(jsonable(document), sort_keys=True, separators=(",", ":")) + "\n"
    return json.dumps(jsonable(document), sort_keys=True, indent=2) + "\n"


def write_document(document: t.Any, path: PathLike, compact: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(dumps(document, compact=compact))


def read_document(path: PathLike, kind: t.Optional[str] = None) -> Document:
    """Read a versioned document, checking ``schema_version`` and, when given, ``kind``."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            document = json.load(handle)
    except FileNotFoundError as err:
        raise MalformedInputError(f"file not found: {path}") from err
    except (OSError, UnicodeDecodeError) as err:
        raise MalformedInputError(f"cannot read {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise MalformedInputError(f"{path} is not valid JSON: {err}") from err
    if not isinstance(document, dict):
        raise MalformedInputError(f"{path}: top level must be an object")
    version = require(document, "schema_version", str(path))
    if version != SCHEMA_VERSION:
        raise MalformedInputError(
            f"{path}: schema_version mismatch, expected {SCHEMA_VERSION}, got {version!r}"
        )
    if kind is not None and document.get("kind") != kind:
        raise MalformedInputError(f"{path}: field 'kind' must be {kind!r}, got {document.get('kind')!r}")
    return document


def require(document: t.Mapping[str, t.Any], key: str, where: str) -> t.Any:
    if not isinstance(document, t.Mapping):
        raise MalformedInputError(f"'{where}' must be an object")
    if key not in document:
        raise MalformedInputError(f"missing field '{where}.{key}'")
    return document[key]


def as_float(value: t.Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedInputError(f"field '{where}' must be a number, got {value!r}")
    return float(value)


def as_int(value: t.Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise MalformedInputError(f"field '{where}' must be an integer, got {value!r}")
    return value


def as_floats(value: t.Any, where: str, length: t.Optional[int] = None) -> t.Tuple[float, ...]:
    if not isinstance(value, list) or (length is not None and len(value) != length):
        expected = "a list" if length is None else f"a list of {length} numbers"
        raise MalformedInputError(f"field '{where}' must be {expected}")
    return tuple(as_float(v, f"{where}[{i}]") for i, v in enumerate(value))


def as_list(value: t.Any, where: str) -> t.List[t.Any]:
    if not isinstance(value, list):
        raise MalformedInputError(f"field '{where}' must be a list")
    return value


def box3_to_dict(box: Box3) -> Document:
    return {"center": list(box.center), "dims": list(box.dims), "yaw": box.yaw}


def box3_from_dict(document: t.Any, where: str) -> Box3:
    return Box3(
        center=as_floats(require(document, "center", where), f"{where}.center", 3),  # type: ignore[arg-type]
        dims=as_floats(require(document, "dims", where), f"{where}.dims", 3),  # type: ignore[arg-type]
        yaw=as_float(require(document, "yaw", where), f"{where}.yaw"),
    )


def box2_to_dict(box: Box2) -> Document:
    return {"min_x": box.min_x, "min_y": box.min_y, "max_x": box.max_x, "max_y": box.max_y}


def box2_from_dict(document: t.Any, where: str) -> Box2:
    return Box2(*(as_float(require(document, k, where), f"{where}.{k}") for k in ("min_x", "min_y", "max_x", "max_y")))


def camera_to_dict(camera: CameraModel) -> Document:
    return {
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "rotation": [list(row) for row in camera.rotation],
        "translation": list(camera.translation),
        "image_w": camera.image_w,
        "image_h": camera.image_h,
    }


def camera_from_dict(document: t.Any, where: str) -> CameraModel:
    rotation = as_list(require(document, "rotation", where), f"{where}.rotation")
    if len(rotation) != 3:
        raise MalformedInputError(f"field '{where}.rotation' must have 3 rows")
    return CameraModel(
        fx=as_float(require(document, "fx", where), f"{where}.fx"),
        fy=as_float(require(document, "fy", where), f"{where}.fy"),
        cx=as_float(require(document, "cx", where), f"{where}.cx"),
        cy=as_float(require(document, "cy", where), f"{where}.cy"),
        rotation=tuple(as_floats(row, f"{where}.rotation[{i}]", 3) for i, row in enumerate(rotation)),  # type: ignore
        translation=as_floats(require(document, "translation", where), f"{where}.translation", 3),  # type: ignore
        image_w=as_int(require(document, "image_w", where), f"{where}.image_w"),
        image_h=as_int(require(document, "image_h", where), f"{where}.image_h"),
    )


def class_spec_to_dict(spec: ClassSpec) -> Document:
    return {
        "class_id": spec.class_id,
        "name": spec.name,
        "size_prior": list(spec.size_prior),
        "size_jitter": spec.size_jitter,
        "surface_point_rate": spec.surface_point_rate,
    }


def class_spec_from_dict(document: t.Any, where: str) -> ClassSpec:
    name = require(document, "name", where)
    if not isinstance(name, str):
        raise MalformedInputError(f"field '{where}.name' must be a string")
    return ClassSpec(
        class_id=as_int(require(document, "class_id", where), f"{where}.class_id"),
        name=name,
        size_prior=as_floats(require(document, "size_prior", where), f"{where}.size_prior", 3),  # type: ignore
        size_jitter=as_float(require(document, "size_jitter", where), f"{where}.size_jitter"),
        surface_point_rate=as_float(require(document, "surface_point_rate", where), f"{where}.surface_point_rate"),
    )


def fixed_object_to_dict(fixed: FixedObject) -> Document:
    return {"class_id": fixed.class_id, "center": list(fixed.center), "yaw": fixed.yaw}


def fixed_object_from_dict(document: t.Any, where: str) -> FixedObject:
    return FixedObject(
        class_id=as_int(require(document, "class_id", where), f"{where}.class_id"),
        center=as_floats(require(document, "center", where), f"{where}.center", 3),  # type: ignore[arg-type]
        yaw=as_float(require(document, "yaw", where), f"{where}.yaw"),
    )


def rle_encode(bitmap: npt.ArrayLike) -> Document:
    """Row-major run lengths, alternating values and starting with the value of the first pixel."""
    grid = np.asarray(bitmap, dtype=bool)
    flat = grid.reshape(-1)
    if flat.size == 0:
        return {"shape": list(grid.shape), "start": 0, "runs": []}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    return {"shape": list(grid.shape), "start": int(flat[0]), "runs": np.diff(bounds).tolist()}


def rle_decode(document: t.Any, where: str = "rle") -> npt.NDArray[np.bool_]:
    shape = require(document, "shape", where)
    if not isinstance(shape, list) or len(shape) != 2:
        raise MalformedInputError(f"field '{where}.shape' must be [height, width]")
    height, width = (as_int(v, f"{where}.shape") for v in shape)
    start = as_int(require(document, "start", where), f"{where}.start")
    if start not in (0, 1):
        raise MalformedInputError(f"field '{where}.start' must be 0 or 1")
    runs = [as_int(r, f"{where}.runs") for r in as_list(require(document, "runs", where), f"{where}.runs")]
    if any(r <= 0 for r in runs) or sum(runs) != height * width:
        raise MalformedInputError(f"field '{where}.runs' must be positive and sum to {height * width}")
    values = (np.arange(len(runs)) + start) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)


def mask_to_dict(mask: InstanceMask) -> Document:
    return {
        "camera_index": mask.camera_index,
        "instance_id": mask.instance_id,
        "class_id": mask.class_id,
        "bbox2": box2_to_dict(mask.bbox2),
        "rle": rle_encode(mask.bitmap),
    }


def mask_from_dict(document: t.Any, where: str) -> InstanceMask:
    return InstanceMask(
        camera_index=as_int(require(document, "camera_index", where), f"{where}.camera_index"),
        instance_id=as_int(require(document, "instance_id", where), f"{where}.instance_id"),
        class_id=as_int(require(document, "class_id", where), f"{where}.class_id"),
        bitmap=rle_decode(require(document, "rle", where), f"{where}.rle"),
        bbox2=box2_from_dict(require(document, "bbox2", where), f"{where}.bbox2"),
    )


def scene_to_dict(scene: Scene) -> Document:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "scene",
        "seed": scene.seed,
        "range_m": scene.range_m,
        "classes": [class_spec_to_dict(c) for c in scene.classes],
        "cameras": [camera_to_dict(c) for c in scene.cameras],
        "gt": [{"box": box3_to_dict(g.box), "class_id": g.class_id, "instance_id": g.instance_id} for g in scene.gt],
        "points": scene.points.tolist(),
        "point_instance": scene.point_instance.tolist(),
        "masks": [[mask_to_dict(m) for m in per_camera] for per_camera in scene.masks],
    }


def scene_from_dict(document: Document) -> Scene:
    gt = [
        GroundTruth(
            box=box3_from_dict(require(g, "box", f"gt[{i}]"), f"gt[{i}].box"),
            class_id=as_int(require(g, "class_id", f"gt[{i}]"), f"gt[{i}].class_id"),
            instance_id=as_int(require(g, "instance_id", f"gt[{i}]"), f"gt[{i}].instance_id"),
        )
        for i, g in enumerate(as_list(require(document, "gt", "scene"), "gt"))
    ]
    raw_points = as_list(require(document, "points", "scene"), "points")
    points = np.array([as_floats(p, f"points[{i}]", 3) for i, p in enumerate(raw_points)], dtype=np.float64)
    raw_instances = as_list(require(document, "point_instance", "scene"), "point_instance")
    point_instance = [as_int(v, "point_instance") for v in raw_instances]
    return Scene(
        gt=tuple(gt),
        points=points.reshape(-1, 3),
        point_instance=np.array(point_instance, dtype=np.int64),
        cameras=tuple(
            camera_from_dict(c, f"cameras[{i}]")
            for i, c in enumerate(as_list(require(document, "cameras", "scene"), "cameras"))
        ),
        masks=tuple(
            tuple(mask_from_dict(m, f"masks[{k}][{j}]") for j, m in enumerate(as_list(per_camera, f"masks[{k}]")))
            for k, per_camera in enumerate(as_list(require(document, "masks", "scene"), "masks"))
        ),
        range_m=as_float(require(document, "range_m", "scene"), "range_m"),
        seed=as_int(require(document, "seed", "scene"), "seed"),
        classes=tuple(
            class_spec_from_dict(c, f"classes[{i}]")
            for i, c in enumerate(as_list(require(document, "classes", "scene"), "classes"))
        ),
    )


def save_scene(scene: Scene, path: PathLike) -> None:
    write_document(scene_to_dict(scene), path, compact=True)


def load_scene(path: PathLike) -> Scene:
    return scene_from_dict(read_document(path, kind="scene"))


def detection_to_dict(detection: Detection) -> Document:
    return {
        "box": box3_to_dict(detection.box),
        "class_id": detection.class_id,
        "score": detection.score,
        "provenance": detection.provenance.value,
    }


def detection_from_dict(document: t.Any, where: str) -> Detection:
    provenance = require(document, "provenance", where)
    try:
        modality = Modality(provenance)
    except ValueError as err:
        raise MalformedInputError(
            f"field '{where}.provenance' must be 'lidar' or 'camera', got {provenance!r}"
        ) from err
    return Detection(
        box=box3_from_dict(require(document, "box", where), f"{where}.box"),
        class_id=as_int(require(document, "class_id", where), f"{where}.class_id"),
        score=as_float(require(document, "score", where), f"{where}.score"),
        provenance=modality,
    )


@dataclass(frozen=True)
class DetectionFile:
    """One scene's detections together with where they came from and the per-stage counts."""

    scene: str
    seed: int
    detections: t.Tuple[Detection, ...]
    stage_counts: t.Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Document:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "detections",
            "scene": self.scene,
            "seed": self.seed,
            "stage_counts": dict(self.stage_counts),
            "detections": [detection_to_dict(d) for d in self.detections],
        }

    @classmethod
    def from_dict(cls, document: Document) -> "DetectionFile":
        scene = require(document, "scene", "detections")
        if not isinstance(scene, str):
            raise MalformedInputError("field 'scene' must be a string")
        counts = require(document, "stage_counts", "detections")
        if not isinstance(counts, dict):
            raise MalformedInputError("field 'stage_counts' must be an object")
        return cls(
            scene=scene,
            seed=as_int(require(document, "seed", "detections"), "seed"),
            detections=tuple(
                detection_from_dict(d, f"detections[{i}]")
                for i, d in enumerate(as_list(require(document, "detections", "detections"), "detections"))
            ),
            stage_counts={str(k): as_int(v, f"stage_counts.{k}") for k, v in counts.items()},
        )


def save_detections(detection_file: DetectionFile, path: PathLike) -> None:
    write_document(detection_file.to_dict(), path)


def load_detections(path: PathLike) -> DetectionFile:
    return DetectionFile.from_dict(read_document(path, kind="detections"))


def output_name(source: PathLike, suffix: str) -> str:
    """File name derived from an input file's stem, so outputs of different inputs never collide."""
    stem = Path(source).name
    for ext in (DETECTIONS_SUFFIX, SCENE_SUFFIX):
        if stem.endswith(ext):
            stem = stem[: -len(ext)]
            break
    return f"{slugify(stem) or 'scene'}{suffix}"


def list_documents(directory: PathLike, suffix: str = SCENE_SUFFIX) -> t.List[Path]:
    """Files in ``directory`` ending in ``suffix``, sorted by name. Scene listings skip detection files."""
    folder = Path(directory)
    if not folder.is_dir():
        raise MalformedInputError(f"directory not found: {directory}")
    skip_detections = suffix != DETECTIONS_SUFFIX
    return sorted(
        p
        for p in folder.iterdir()
        if p.is_file() and p.name.endswith(suffix) and not (skip_detections and p.name.endswith(DETECTIONS_SUFFIX))
    )
