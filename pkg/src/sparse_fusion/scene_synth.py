"""Deterministic synthetic scenes: ground truth boxes, LiDAR returns, a camera rig and oracle instance masks.

Randomness is split into independent streams. Every generator is built from
``SeedSequence(entropy=seed, spawn_key=(stream, *instance))`` where ``stream`` is a :class:`RngStream` and the
instance part is the instance id (and camera index where the operation is per camera), so adding an object
never perturbs the samples of the others.
"""

import enum
import logging
import math
import typing as t
from dataclasses import dataclass, field, replace

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from .exceptions import ConstraintViolationError
from .geom3d import Box2, Box3, CameraModel, Vec3, box3_corners, nearest_pixels, points_in_box3, project_points


logger = logging.getLogger(__name__)

BACKGROUND: int = -1
SPURIOUS: int = -1
MAX_PLACEMENT_ATTEMPTS: int = 10_000
MAX_MASK_SAMPLES: int = 200_000
MAX_CLASSES: int = 16

IntArray = npt.NDArray[np.int64]
FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]


class RngStream(enum.IntEnum):
    """Operations owning an independent random stream."""

    PLACEMENT = 1
    SURFACE = 2
    DROPOUT = 3
    BACKGROUND = 4
    MASK_RESAMPLE = 5
    MASK_NOISE = 6
    SCORE_FLIP = 7
    VOTE_NOISE = 8


def stream_rng(seed: int, stream: RngStream, *instance: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),) + tuple(int(i) for i in instance))
    )


def derive_seed(root_seed: int, index: int) -> int:
    """64-bit seed of the ``index``-th scene of a run seeded with ``root_seed``."""
    state = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(int(index),)).generate_state(2, np.uint32)
    return (int(state[0]) << 32) | int(state[1])


def _check_seed(seed: int, name: str) -> int:
    if int(seed) != seed or not 0 <= int(seed) < 2**64:
        raise ConstraintViolationError(f"{name} must be an integer in [0, 2**64), got {seed!r}")
    return int(seed)


def _check_probability(value: float, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ConstraintViolationError(f"{name} must be in [0, 1], got {value!r}")
    return value


@dataclass(frozen=True)
class ClassSpec:
    """An object category with its size prior and LiDAR return density."""

    class_id: int
    name: str
    size_prior: Vec3
    size_jitter: float
    surface_point_rate: float

    def __post_init__(self) -> None:
        if int(self.class_id) != self.class_id or not 0 <= int(self.class_id) < MAX_CLASSES:
            raise ConstraintViolationError(
                f"ClassSpec.class_id must be an integer in [0, {MAX_CLASSES}), got {self.class_id!r}"
            )
        prior = tuple(float(v) for v in self.size_prior)
        if len(prior) != 3 or not all(math.isfinite(v) and v > 0.0 for v in prior):
            raise ConstraintViolationError(f"ClassSpec.size_prior of {self.name!r} must be 3 positive values")
        if not 0.0 <= float(self.size_jitter) <= 0.5:
            raise ConstraintViolationError(f"ClassSpec.size_jitter of {self.name!r} must be in [0, 0.5]")
        if not float(self.surface_point_rate) > 0.0:
            raise ConstraintViolationError(f"ClassSpec.surface_point_rate of {self.name!r} must be positive")
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "size_prior", prior)
        object.__setattr__(self, "size_jitter", float(self.size_jitter))
        object.__setattr__(self, "surface_point_rate", float(self.surface_point_rate))

    @property
    def footprint(self) -> t.Tuple[float, float, float]:
        w, l, h = self.size_prior
        return max(w, l), min(w, l), h


def default_classes() -> t.Tuple[ClassSpec, ...]:
    return (
        ClassSpec(0, "car", (1.9, 4.5, 1.6), 0.1, 30.0),
        ClassSpec(1, "truck", (2.5, 6.5, 3.0), 0.1, 15.0),
        ClassSpec(2, "pedestrian", (0.6, 0.6, 1.7), 0.1, 60.0),
        ClassSpec(3, "bicycle", (0.6, 1.7, 1.3), 0.1, 40.0),
        ClassSpec(4, "traffic_cone", (0.4, 0.4, 1.0), 0.1, 120.0),
    )


def default_camera_rig(
    n_cameras: int = 6,
    image_w: int = 480,
    image_h: int = 270,
    focal_px: float = 240.0,
    height_m: float = 1.8,
) -> t.Tuple[CameraModel, ...]:
    """Level cameras at the ego origin with evenly spaced headings, the first looking along world ``x``."""
    if n_cameras < 0:
        raise ConstraintViolationError(f"n_cameras must be >= 0, got {n_cameras}")
    return tuple(
        CameraModel.from_pose(
            position=(0.0, 0.0, height_m),
            yaw=2.0 * math.pi * k / n_cameras,
            fx=focal_px,
            fy=focal_px,
            image_w=image_w,
            image_h=image_h,
        )
        for k in range(n_cameras)
    )


class FixedObject(t.NamedTuple):
    """A placement that bypasses random sampling."""

    class_id: int
    center: Vec3
    yaw: float


class GroundTruth(t.NamedTuple):
    box: Box3
    class_id: int
    instance_id: int


@dataclass(frozen=True)
class SceneConfig:
    range_m: float = 54.0
    n_objects: int = 8
    classes: t.Tuple[ClassSpec, ...] = field(default_factory=default_classes)
    cameras: t.Tuple[CameraModel, ...] = field(default_factory=default_camera_rig)
    background_points: int = 20_000
    point_dropout: float = 0.0
    distance_attenuation_exp: float = 2.0
    min_center_gap: float = 4.0
    ego_clearance_m: float = 4.0
    fixed_objects: t.Tuple[FixedObject, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "fixed_objects", tuple(FixedObject(*f) for f in self.fixed_objects))
        if not math.isfinite(self.range_m) or self.range_m <= 0:
            raise ConstraintViolationError(f"scene.range_m must be positive, got {self.range_m!r}")
        if int(self.n_objects) != self.n_objects or self.n_objects < 0:
            raise ConstraintViolationError(f"scene.n_objects must be a non-negative integer, got {self.n_objects!r}")
        if int(self.background_points) != self.background_points or self.background_points < 0:
            raise ConstraintViolationError(
                f"scene.background_points must be a non-negative integer, got {self.background_points!r}"
            )
        _check_probability(self.point_dropout, "scene.point_dropout")
        if not math.isfinite(self.distance_attenuation_exp) or self.distance_attenuation_exp < 0:
            raise ConstraintViolationError("scene.distance_attenuation_exp must be a finite value >= 0")
        if not math.isfinite(self.min_center_gap) or self.min_center_gap < 0:
            raise ConstraintViolationError(f"scene.min_center_gap must be >= 0, got {self.min_center_gap!r}")
        if not math.isfinite(self.ego_clearance_m) or self.ego_clearance_m < 0:
            raise ConstraintViolationError(f"scene.ego_clearance_m must be >= 0, got {self.ego_clearance_m!r}")
        _check_seed(self.seed, "scene.seed")
        if not self.classes and (self.n_objects or self.fixed_objects):
            raise ConstraintViolationError("scene.classes must not be empty when objects are requested")
        class_ids = [c.class_id for c in self.classes]
        if len(set(class_ids)) != len(class_ids):
            raise ConstraintViolationError(f"scene.classes has duplicate class ids: {class_ids}")
        for fixed in self.fixed_objects:
            if fixed.class_id not in class_ids:
                raise ConstraintViolationError(f"scene.fixed_objects references unknown class_id {fixed.class_id}")

    def class_spec(self, class_id: int) -> ClassSpec:
        for spec in self.classes:
            if spec.class_id == class_id:
                return spec
        raise ConstraintViolationError(f"unknown class_id {class_id}")


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """One instance's pixels in one camera; ``bitmap`` is an ``(image_h, image_w)`` bool array."""

    camera_index: int
    instance_id: int
    class_id: int
    bitmap: BoolArray
    bbox2: Box2

    def __post_init__(self) -> None:
        bitmap = np.asarray(self.bitmap, dtype=bool)
        bitmap.setflags(write=False)
        object.__setattr__(self, "bitmap", bitmap)
        if bitmap.ndim != 2 or not bitmap.any():
            raise ConstraintViolationError("InstanceMask.bitmap must be a 2D grid with at least one set bit")
        if tight_bbox(bitmap) != self.bbox2:
            raise ConstraintViolationError("InstanceMask.bbox2 must be the tight bounds of the set bits")

    @classmethod
    def from_bitmap(cls, camera_index: int, instance_id: int, class_id: int, bitmap: npt.ArrayLike) -> "InstanceMask":
        grid = np.asarray(bitmap, dtype=bool)
        if not grid.any():
            raise ConstraintViolationError("InstanceMask.bitmap must have at least one set bit")
        return cls(camera_index, instance_id, class_id, grid, tight_bbox(grid))

    @property
    def spurious(self) -> bool:
        return self.instance_id == SPURIOUS

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InstanceMask):
            return NotImplemented
        return (
            self.camera_index == other.camera_index
            and self.instance_id == other.instance_id
            and self.class_id == other.class_id
            and self.bbox2 == other.bbox2
            and np.array_equal(self.bitmap, other.bitmap)
        )

    __hash__ = None  # type: ignore[assignment]


def tight_bbox(bitmap: BoolArray) -> Box2:
    """Tight bounds of the set bits; pixel ``(row, col)`` covers ``[col - 0.5, col + 0.5] x [row - 0.5, row + 0.5]``."""
    rows = np.flatnonzero(bitmap.any(axis=1))
    cols = np.flatnonzero(bitmap.any(axis=0))
    if rows.size == 0:
        raise ConstraintViolationError("cannot bound an empty bitmap")
    return Box2(
        min_x=float(cols[0]) - 0.5,
        min_y=float(rows[0]) - 0.5,
        max_x=float(cols[-1]) + 0.5,
        max_y=float(rows[-1]) + 0.5,
    )


MasksPerCamera = t.Tuple[t.Tuple[InstanceMask, ...], ...]


@dataclass(frozen=True, eq=False)
class Scene:
    """Ground truth, the point cloud with per-point instance ids, the camera rig and masks per camera."""

    gt: t.Tuple[GroundTruth, ...]
    points: FloatArray
    point_instance: IntArray
    cameras: t.Tuple[CameraModel, ...]
    masks: MasksPerCamera
    range_m: float
    seed: int
    classes: t.Tuple[ClassSpec, ...]

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        point_instance = np.asarray(self.point_instance, dtype=np.int64).reshape(-1)
        if point_instance.shape[0] != points.shape[0]:
            raise ConstraintViolationError("Scene.point_instance must have one entry per point")
        if not np.isfinite(points).all():
            raise ConstraintViolationError("Scene.points must be finite")
        ids = [g.instance_id for g in self.gt]
        if len(set(ids)) != len(ids):
            raise ConstraintViolationError(f"Scene.gt instance ids must be unique, got {ids}")
        unknown = set(np.unique(point_instance).tolist()) - set(ids) - {BACKGROUND}
        if unknown:
            raise ConstraintViolationError(f"Scene.point_instance references unknown instances {sorted(unknown)}")
        if len(self.masks) != len(self.cameras):
            raise ConstraintViolationError("Scene.masks must hold one list per camera")
        for camera_index, per_camera in enumerate(self.masks):
            for mask in per_camera:
                if mask.camera_index != camera_index:
                    raise ConstraintViolationError("InstanceMask.camera_index does not match its camera list")
                if not mask.spurious and mask.instance_id not in ids:
                    raise ConstraintViolationError(f"InstanceMask references unknown instance {mask.instance_id}")
        points.setflags(write=False)
        point_instance.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "point_instance", point_instance)
        object.__setattr__(self, "gt", tuple(GroundTruth(*g) for g in self.gt))
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "masks", tuple(tuple(m) for m in self.masks))
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def gt_boxes(self) -> t.List[Box3]:
        return [g.box for g in self.gt]

    @property
    def n_masks(self) -> int:
        return sum(len(m) for m in self.masks)

    def gt_index(self, instance_id: int) -> int:
        for index, g in enumerate(self.gt):
            if g.instance_id == instance_id:
                return index
        raise KeyError(instance_id)

    def with_masks(self, masks: MasksPerCamera) -> "Scene":
        return replace(self, masks=masks)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.gt == other.gt
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.point_instance, other.point_instance)
            and self.cameras == other.cameras
            and self.masks == other.masks
            and self.range_m == other.range_m
            and self.seed == other.seed
            and self.classes == other.classes
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class MaskNoise:
    """Degradations applied to oracle masks."""

    drop_prob: float = 0.0
    dilate_px: int = 0
    erode_px: int = 0
    spurious_prob: float = 0.0
    merge_prob: float = 0.0

    def __post_init__(self) -> None:
        for name in ("drop_prob", "spurious_prob", "merge_prob"):
            object.__setattr__(self, name, _check_probability(getattr(self, name), f"mask_noise.{name}"))
        for name in ("dilate_px", "erode_px"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise ConstraintViolationError(f"mask_noise.{name} must be a non-negative integer, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def is_identity(self) -> bool:
        return not (self.drop_prob or self.dilate_px or self.erode_px or self.spurious_prob or self.merge_prob)


def surface_area(dims: t.Sequence[float]) -> float:
    """Area of the five visible faces (no bottom)."""
    w, l, h = dims
    return w * l + 2.0 * l * h + 2.0 * w * h


def expected_point_count(box: Box3, rate: float, attenuation_exp: float) -> int:
    distance = max(math.hypot(box.center[0], box.center[1]), 1.0)
    return int(round(surface_area(box.dims) * rate * (10.0 / distance) ** attenuation_exp))


def sample_box_surface(box: Box3, n: int, rng: np.random.Generator) -> FloatArray:
    """``n`` points uniform over the top and the four side faces of ``box``."""
    if n <= 0:
        return np.empty((0, 3), dtype=np.float64)
    w, l, h = box.dims
    areas = np.array([w * l, l * h, l * h, w * h, w * h])
    faces = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)

    local = np.empty((n, 3), dtype=np.float64)
    top, plus_x, minus_x, plus_y, minus_y = (faces == k for k in range(5))
    local[top] = np.column_stack([u[top] * w, v[top] * l, np.full(top.sum(), h / 2.0)])
    for sel, sign in ((plus_x, 1.0), (minus_x, -1.0)):
        local[sel] = np.column_stack([np.full(sel.sum(), sign * w / 2.0), u[sel] * l, v[sel] * h])
    for sel, sign in ((plus_y, 1.0), (minus_y, -1.0)):
        local[sel] = np.column_stack([u[sel] * w, np.full(sel.sum(), sign * l / 2.0), v[sel] * h])

    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = box.center[0] + c * local[:, 0] - s * local[:, 1]
    world[:, 1] = box.center[1] + s * local[:, 0] + c * local[:, 1]
    world[:, 2] = box.center[2] + local[:, 2]
    return world


def _jittered_dims(spec: ClassSpec, rng: np.random.Generator) -> Vec3:
    factors = 1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter, size=3)
    w, l, h = (p * f for p, f in zip(spec.size_prior, factors))
    return w, l, h


def _place_objects(cfg: SceneConfig) -> t.List[GroundTruth]:
    placed: t.List[GroundTruth] = []
    for fixed in cfg.fixed_objects:
        instance_id = len(placed) + 1
        rng = stream_rng(cfg.seed, RngStream.PLACEMENT, instance_id)
        box = Box3(fixed.center, _jittered_dims(cfg.class_spec(fixed.class_id), rng), fixed.yaw)
        placed.append(GroundTruth(box, fixed.class_id, instance_id))

    for _ in range(cfg.n_objects):
        instance_id = len(placed) + 1
        rng = stream_rng(cfg.seed, RngStream.PLACEMENT, instance_id)
        spec = cfg.classes[int(rng.integers(len(cfg.classes)))]
        dims = _jittered_dims(spec, rng)
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            x, y = rng.uniform(-cfg.range_m, cfg.range_m, size=2)
            yaw = rng.uniform(-math.pi, math.pi)
            if math.hypot(x, y) < cfg.ego_clearance_m:
                continue
            if cfg.min_center_gap > 0 and any(
                math.hypot(x - g.box.center[0], y - g.box.center[1]) < cfg.min_center_gap for g in placed
            ):
                continue
            placed.append(GroundTruth(Box3((x, y, dims[2] / 2.0), dims, yaw), spec.class_id, instance_id))
            break
        else:
            raise ConstraintViolationError(
                f"could not place object {instance_id} after {MAX_PLACEMENT_ATTEMPTS} attempts: "
                f"min_center_gap={cfg.min_center_gap} is too large for range_m={cfg.range_m} "
                f"with ego_clearance_m={cfg.ego_clearance_m}"
            )
    return placed


def _sample_background(cfg: SceneConfig, boxes: t.Sequence[Box3]) -> FloatArray:
    rng = stream_rng(cfg.seed, RngStream.BACKGROUND, 0)
    kept: t.List[FloatArray] = [np.empty((0, 3), dtype=np.float64)]
    have = 0
    rounds = 0
    while have < cfg.background_points:
        rounds += 1
        if rounds > 1000:
            raise ConstraintViolationError("scene.background_points cannot be placed outside the ground truth boxes")
        batch = cfg.background_points - have
        batch += batch // 4 + 16
        candidates = np.column_stack(
            [
                rng.uniform(-cfg.range_m, cfg.range_m, size=batch),
                rng.uniform(-cfg.range_m, cfg.range_m, size=batch),
                rng.uniform(-0.2, 0.2, size=batch),
            ]
        )
        outside = np.ones(batch, dtype=bool)
        for box in boxes:
            outside &= ~points_in_box3(candidates, box)
        candidates = candidates[outside][: cfg.background_points - have]
        kept.append(candidates)
        have += candidates.shape[0]
    return np.concatenate(kept, axis=0)


def generate_scene(cfg: SceneConfig) -> Scene:
    """Generate ground truth, LiDAR returns and clean oracle masks for ``cfg``."""
    gts = _place_objects(cfg)

    chunks: t.List[FloatArray] = []
    labels: t.List[IntArray] = []
    for g in gts:
        spec = cfg.class_spec(g.class_id)
        n = expected_point_count(g.box, spec.surface_point_rate, cfg.distance_attenuation_exp)
        pts = sample_box_surface(g.box, n, stream_rng(cfg.seed, RngStream.SURFACE, g.instance_id))
        if cfg.point_dropout > 0.0 and n > 0:
            keep = stream_rng(cfg.seed, RngStream.DROPOUT, g.instance_id).random(n) >= cfg.point_dropout
            pts = pts[keep]
        chunks.append(pts)
        labels.append(np.full(pts.shape[0], g.instance_id, dtype=np.int64))

    background = _sample_background(cfg, [g.box for g in gts])
    chunks.append(background)
    labels.append(np.full(background.shape[0], BACKGROUND, dtype=np.int64))

    scene = Scene(
        gt=tuple(gts),
        points=np.concatenate(chunks, axis=0) if chunks else np.empty((0, 3)),
        point_instance=np.concatenate(labels) if labels else np.empty(0, dtype=np.int64),
        cameras=cfg.cameras,
        masks=tuple(() for _ in cfg.cameras),
        range_m=cfg.range_m,
        seed=cfg.seed,
        classes=cfg.classes,
    )
    if not gts:
        logger.debug("scene %d has no objects", cfg.seed)
    return scene.with_masks(render_masks(scene))


_CLOSING_KERNEL: BoolArray = np.ones((3, 3), dtype=bool)


def _close(raster: BoolArray, pad: int = 2) -> BoolArray:
    rows = np.flatnonzero(raster.any(axis=1))
    cols = np.flatnonzero(raster.any(axis=0))
    r0, r1 = max(rows[0] - pad, 0), min(rows[-1] + pad + 1, raster.shape[0])
    c0, c1 = max(cols[0] - pad, 0), min(cols[-1] + pad + 1, raster.shape[1])
    crop = raster[r0:r1, c0:c1]
    closed = raster.copy()
    closed[r0:r1, c0:c1] = ndimage.binary_closing(crop, structure=_CLOSING_KERNEL) | crop
    return closed


def render_masks(scene: Scene) -> MasksPerCamera:
    """Rasterise every instance into every camera it is visible in.

    A dense resample of the five visible faces plus the instance's own LiDAR returns is projected and the
    hits are closed with a 3x3 kernel. Instances are not occluded by each other.
    """
    specs = {c.class_id: c for c in scene.classes}
    masks: t.List[t.List[InstanceMask]] = [[] for _ in scene.cameras]
    for camera_index, camera in enumerate(scene.cameras):
        for g in scene.gt:
            corner_depth = camera.to_camera(box3_corners(g.box))[:, 2]
            if not (corner_depth > 0.0).any():
                continue
            nearest = max(float(corner_depth[corner_depth > 0.0].min()), 1e-3)
            rate = specs[g.class_id].surface_point_rate if g.class_id in specs else 1.0
            density = max(20.0 * rate, 2.0 * (camera.fx / nearest) ** 2)
            n = min(int(math.ceil(surface_area(g.box.dims) * density)), MAX_MASK_SAMPLES)
            rng = stream_rng(scene.seed, RngStream.MASK_RESAMPLE, g.instance_id, camera_index)
            samples = np.concatenate(
                [sample_box_surface(g.box, n, rng), scene.points[scene.point_instance == g.instance_id]], axis=0
            )
            uv, _depth = project_points(samples, camera)
            _, rows, cols = nearest_pixels(uv, camera)
            if rows.size == 0:
                continue
            raster = np.zeros((camera.image_h, camera.image_w), dtype=bool)
            raster[rows, cols] = True
            masks[camera_index].append(
                InstanceMask.from_bitmap(camera_index, g.instance_id, g.class_id, _close(raster))
            )
    return tuple(tuple(m) for m in masks)


def disk(radius: int) -> BoolArray:
    """Disk shaped structuring element of the given pixel radius."""
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return np.asarray(xx * xx + yy * yy <= radius * radius)


def apply_mask_noise(
    masks: MasksPerCamera,
    noise: MaskNoise,
    seed: int,
    cameras: t.Sequence[CameraModel],
    class_ids: t.Sequence[int] = (0,),
) -> MasksPerCamera:
    """Degrade masks: drop, dilate then erode, inject spurious rectangles, merge a same-camera pair.

    Each camera draws from its own stream, so the result is a pure function of the inputs and ``seed``.
    """
    if noise.is_identity:
        return tuple(tuple(m) for m in masks)
    seed = _check_seed(seed, "mask noise seed")
    degraded: t.List[t.Tuple[InstanceMask, ...]] = []
    for camera_index, per_camera in enumerate(masks):
        camera = cameras[camera_index]
        rng = stream_rng(seed, RngStream.MASK_NOISE, camera_index)
        survivors: t.List[InstanceMask] = []
        for mask in per_camera:
            if rng.random() < noise.drop_prob:
                continue
            bitmap = np.array(mask.bitmap, dtype=bool)
            if noise.dilate_px:
                bitmap = ndimage.binary_dilation(bitmap, structure=disk(noise.dilate_px))
            if noise.erode_px:
                bitmap = ndimage.binary_erosion(bitmap, structure=disk(noise.erode_px), border_value=1)
            if not bitmap.any():
                continue
            survivors.append(InstanceMask.from_bitmap(camera_index, mask.instance_id, mask.class_id, bitmap))

        if rng.random() < noise.spurious_prob:
            width = int(rng.integers(8, max(camera.image_w // 4, 8) + 1))
            height = int(rng.integers(8, max(camera.image_h // 4, 8) + 1))
            width, height = min(width, camera.image_w), min(height, camera.image_h)
            col = int(rng.integers(0, camera.image_w - width + 1))
            row = int(rng.integers(0, camera.image_h - height + 1))
            bitmap = np.zeros((camera.image_h, camera.image_w), dtype=bool)
            bitmap[row : row + height, col : col + width] = True
            class_id = int(class_ids[int(rng.integers(len(class_ids)))])
            survivors.append(InstanceMask.from_bitmap(camera_index, SPURIOUS, class_id, bitmap))

        if len(survivors) >= 2 and rng.random() < noise.merge_prob:
            first, second = sorted(int(i) for i in rng.choice(len(survivors), size=2, replace=False))
            keep = survivors[first]
            merged = InstanceMask.from_bitmap(
                camera_index, keep.instance_id, keep.class_id, keep.bitmap | survivors[second].bitmap
            )
            survivors[first] = merged
            del survivors[second]
        degraded.append(tuple(survivors))
    return tuple(degraded)


def degrade_scene(scene: Scene, noise: MaskNoise, seed: t.Optional[int] = None) -> Scene:
    """Return ``scene`` with :func:`apply_mask_noise` applied to its masks."""
    if noise.is_identity:
        return scene
    return scene.with_masks(
        apply_mask_noise(
            scene.masks,
            noise,
            scene.seed if seed is None else seed,
            scene.cameras,
            class_ids=[c.class_id for c in scene.classes] or (0,),
        )
    )
