"""Geometric primitives: oriented 3D boxes, pinhole cameras, projection, containment and box fitting.

Conventions used throughout the package:

* the world frame is right handed with ``z`` up;
* a :class:`Box3` has dims ``(w, l, h)`` where ``w`` is the extent along the box's local ``x`` axis
  (the heading, ``yaw`` radians counter-clockwise from world ``x``), ``l`` along local ``y`` and ``h``
  along ``z``;
* a camera frame has ``x`` pointing right in the image, ``y`` down and ``z`` forward.
"""

import math
import typing as t
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import numpy.typing as npt

from .exceptions import ConstraintViolationError


Vec3 = t.Tuple[float, float, float]
FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

DEPTH_EPS: float = 1e-6
DIM_FLOOR: float = 0.05
CONTAINMENT_EPS: float = 1e-9
RANK_RATIO: float = 1e-6
ORTHONORMAL_TOL: float = 1e-9


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped: float = math.remainder(float(angle), 2.0 * math.pi)
    if wrapped <= -math.pi:
        return math.pi
    return wrapped


def angular_distance(a: float, b: float) -> float:
    """Absolute wrapped difference of two angles, in [0, pi]."""
    return abs(wrap_angle(a - b))


def _fold_half_turn(angle: float) -> float:
    """Fold an axis direction to (-pi/2, pi/2]; an axis and its opposite are the same axis."""
    folded: float = wrap_angle(angle)
    if folded > math.pi / 2.0:
        folded -= math.pi
    elif folded <= -math.pi / 2.0:
        folded += math.pi
    return folded


def _as_vec3(value: t.Iterable[float], name: str) -> Vec3:
    try:
        components = tuple(float(v) for v in value)
    except (TypeError, ValueError) as err:
        raise ConstraintViolationError(f"{name} must be three real numbers, got {value!r}") from err
    if len(components) != 3:
        raise ConstraintViolationError(f"{name} must have exactly 3 components, got {len(components)}")
    if not all(math.isfinite(c) for c in components):
        raise ConstraintViolationError(f"{name} must be finite, got {components!r}")
    return components[0], components[1], components[2]


@dataclass(frozen=True)
class Box3:
    """Oriented 3D bounding box."""

    center: Vec3
    dims: Vec3
    yaw: float = 0.0

    def __post_init__(self) -> None:
        center: Vec3 = _as_vec3(self.center, "Box3.center")
        dims: Vec3 = _as_vec3(self.dims, "Box3.dims")
        if min(dims) <= 0.0:
            raise ConstraintViolationError(f"Box3.dims must be positive, got {dims!r}")
        yaw = float(self.yaw)
        if not math.isfinite(yaw):
            raise ConstraintViolationError(f"Box3.yaw must be finite, got {self.yaw!r}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", wrap_angle(yaw))

    @property
    def w(self) -> float:
        return self.dims[0]

    @property
    def l(self) -> float:  # noqa: E743
        return self.dims[1]

    @property
    def h(self) -> float:
        return self.dims[2]

    @property
    def volume(self) -> float:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def center_array(self) -> FloatArray:
        return np.array(self.center, dtype=np.float64)

    @property
    def footprint(self) -> t.Tuple[float, float, float]:
        """Orientation free size signature ``(max(w, l), min(w, l), h)``."""
        return max(self.dims[0], self.dims[1]), min(self.dims[0], self.dims[1]), self.dims[2]


@dataclass(frozen=True)
class Box2:
    """Axis aligned image box in pixels."""

    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self) -> None:
        values = (float(self.min_x), float(self.min_y), float(self.max_x), float(self.max_y))
        if not all(math.isfinite(v) for v in values):
            raise ConstraintViolationError(f"Box2 bounds must be finite, got {values!r}")
        if values[2] < values[0] or values[3] < values[1]:
            raise ConstraintViolationError(f"Box2 requires max >= min on both axes, got {values!r}")
        for name, value in zip(("min_x", "min_y", "max_x", "max_y"), values):
            object.__setattr__(self, name, value)

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> t.Tuple[float, float]:
        return (self.min_x + self.max_x) / 2.0, (self.min_y + self.max_y) / 2.0


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with a rigid world-to-camera transform ``p_cam = R @ p_world + t``."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: t.Tuple[Vec3, Vec3, Vec3]
    translation: Vec3
    image_w: int
    image_h: int

    def __post_init__(self) -> None:
        for name in ("fx", "fy", "cx", "cy"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ConstraintViolationError(f"CameraModel.{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ConstraintViolationError(f"CameraModel focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        for name in ("image_w", "image_h"):
            value = getattr(self, name)
            if int(value) != value or int(value) <= 0:
                raise ConstraintViolationError(f"CameraModel.{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if len(tuple(self.rotation)) != 3:
            raise ConstraintViolationError("CameraModel.rotation must have 3 rows")
        rows = tuple(_as_vec3(row, "CameraModel.rotation row") for row in self.rotation)
        matrix = np.array(rows, dtype=np.float64)
        if np.max(np.abs(matrix @ matrix.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise ConstraintViolationError("CameraModel.rotation must be orthonormal")
        if abs(np.linalg.det(matrix) - 1.0) > ORTHONORMAL_TOL:
            raise ConstraintViolationError("CameraModel.rotation must have determinant 1")
        object.__setattr__(self, "rotation", rows)
        object.__setattr__(self, "translation", _as_vec3(self.translation, "CameraModel.translation"))

    @classmethod
    def from_pose(
        cls,
        position: t.Iterable[float],
        yaw: float,
        fx: float,
        fy: float,
        image_w: int,
        image_h: int,
        cx: t.Optional[float] = None,
        cy: t.Optional[float] = None,
    ) -> "CameraModel":
        """Build a level camera at ``position`` looking along world heading ``yaw``."""
        c, s = math.cos(yaw), math.sin(yaw)
        rows: t.Tuple[Vec3, Vec3, Vec3] = ((s, -c, 0.0), (0.0, 0.0, -1.0), (c, s, 0.0))
        p = np.array(_as_vec3(position, "camera position"), dtype=np.float64)
        trans = -(np.array(rows, dtype=np.float64) @ p)
        return cls(
            fx=fx,
            fy=fy,
            cx=image_w / 2.0 if cx is None else cx,
            cy=image_h / 2.0 if cy is None else cy,
            rotation=rows,
            translation=(float(trans[0]), float(trans[1]), float(trans[2])),
            image_w=image_w,
            image_h=image_h,
        )

    @cached_property
    def rotation_matrix(self) -> FloatArray:
        matrix = np.array(self.rotation, dtype=np.float64)
        matrix.setflags(write=False)
        return matrix

    @cached_property
    def translation_vector(self) -> FloatArray:
        vector = np.array(self.translation, dtype=np.float64)
        vector.setflags(write=False)
        return vector

    @cached_property
    def position(self) -> FloatArray:
        """Optical center in world coordinates."""
        center = -(self.rotation_matrix.T @ self.translation_vector)
        center.setflags(write=False)
        return center

    def to_camera(self, points: npt.ArrayLike) -> FloatArray:
        """Transform ``(N, 3)`` world points into the camera frame."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation_matrix.T + self.translation_vector


def project(point: t.Iterable[float], camera: CameraModel) -> t.Optional[t.Tuple[float, float, float]]:
    """Project a world point to ``(u, v, depth)``; ``None`` when the point is not in front of the camera.

    Pixel coordinates are not clipped to the image.
    """
    x, y, z = camera.to_camera(np.asarray(tuple(point), dtype=np.float64))[0]
    if z <= DEPTH_EPS:
        return None
    return camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy, float(z)


def project_points(points: npt.ArrayLike, camera: CameraModel) -> t.Tuple[FloatArray, FloatArray]:
    """Vectorised :func:`project`.

    Returns ``(uv, depth)``; rows whose depth is not above :data:`DEPTH_EPS` have ``uv`` set to NaN.
    """
    cam = camera.to_camera(points)
    depth = cam[:, 2]
    uv = np.full((cam.shape[0], 2), np.nan, dtype=np.float64)
    front = depth > DEPTH_EPS
    uv[front, 0] = camera.fx * cam[front, 0] / depth[front] + camera.cx
    uv[front, 1] = camera.fy * cam[front, 1] / depth[front] + camera.cy
    return uv, depth


def nearest_pixels(uv: FloatArray, camera: CameraModel) -> t.Tuple[IntArray, IntArray, IntArray]:
    """Round ``uv`` to the nearest pixel (ties toward +inf) and keep the in-image hits.

    Returns ``(index, rows, cols)``, where ``index`` selects the kept rows of ``uv``.
    """
    finite = np.isfinite(uv).all(axis=1)
    cols = np.floor(uv[finite, 0] + 0.5)
    rows = np.floor(uv[finite, 1] + 0.5)
    inside = (cols >= 0) & (cols < camera.image_w) & (rows >= 0) & (rows < camera.image_h)
    return np.flatnonzero(finite)[inside], rows[inside].astype(np.int64), cols[inside].astype(np.int64)


def unproject(u: float, v: float, depth: float, camera: CameraModel) -> Vec3:
    """Back-project pixel ``(u, v)`` at camera depth ``depth`` to a world point."""
    if not math.isfinite(depth) or depth <= 0.0:
        raise ConstraintViolationError(f"unproject depth must be positive, got {depth!r}")
    cam = np.array(
        [(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth],
        dtype=np.float64,
    )
    world = camera.rotation_matrix.T @ (cam - camera.translation_vector)
    return float(world[0]), float(world[1]), float(world[2])


def points_in_box3(points: npt.ArrayLike, box: Box3) -> npt.NDArray[np.bool_]:
    """Boundary inclusive containment mask of ``(N, 3)`` points in ``box``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    offset = pts - box.center_array
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local_x = c * offset[:, 0] + s * offset[:, 1]
    local_y = -s * offset[:, 0] + c * offset[:, 1]
    half_w, half_l, half_h = (d / 2.0 + CONTAINMENT_EPS for d in box.dims)
    return (np.abs(local_x) <= half_w) & (np.abs(local_y) <= half_l) & (np.abs(offset[:, 2]) <= half_h)


def point_in_box3(point: t.Iterable[float], box: Box3) -> bool:
    return bool(points_in_box3(np.asarray(tuple(point), dtype=np.float64), box)[0])


# bottom face then top face, each counter-clockwise from the (+w, +l) corner
_CORNER_SIGNS: FloatArray = np.array(
    [
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
    ],
    dtype=np.float64,
)


def box3_corners(box: Box3) -> FloatArray:
    """The 8 corners as an ``(8, 3)`` array.

    Order: bottom face ``(+w,+l), (-w,+l), (-w,-l), (+w,-l)`` in the box frame, then the top face in the
    same order.
    """
    local = _CORNER_SIGNS * (np.array(box.dims, dtype=np.float64) / 2.0)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    corners = np.empty_like(local)
    corners[:, 0] = box.center[0] + c * local[:, 0] - s * local[:, 1]
    corners[:, 1] = box.center[1] + s * local[:, 0] + c * local[:, 1]
    corners[:, 2] = box.center[2] + local[:, 2]
    return corners


def project_box3(box: Box3, camera: CameraModel) -> t.Optional[Box2]:
    """Axis aligned hull of the projected corners that lie in front of the camera, unclamped."""
    uv, depth = project_points(box3_corners(box), camera)
    front = depth > DEPTH_EPS
    if not front.any():
        return None
    visible = uv[front]
    return Box2(
        min_x=float(visible[:, 0].min()),
        min_y=float(visible[:, 1].min()),
        max_x=float(visible[:, 0].max()),
        max_y=float(visible[:, 1].max()),
    )


def iou2d(a: Box2, b: Box2) -> float:
    inter_w = max(0.0, min(a.max_x, b.max_x) - max(a.min_x, b.min_x))
    inter_h = max(0.0, min(a.max_y, b.max_y) - max(a.min_y, b.min_y))
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def bev_distance(a: t.Sequence[float], b: t.Sequence[float]) -> float:
    """Bird's-eye-view (xy) distance between two points."""
    return math.hypot(a[0] - b[0], a[1] - b[1])


def principal_yaw(points: npt.ArrayLike, min_points: int = 3) -> t.Optional[float]:
    """Direction of the major axis of the xy covariance folded to (-pi/2, pi/2].

    ``None`` when there are fewer than ``min_points`` points or the covariance is rank deficient.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < max(min_points, 2):
        return None
    cov = np.cov(pts[:, :2], rowvar=False, bias=True)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[1] <= 0.0 or eigvals[0] / eigvals[1] < RANK_RATIO:
        return None
    major = eigvecs[:, 1]
    return _fold_half_turn(math.atan2(major[1], major[0]))


def fit_box_pca(points: npt.ArrayLike, min_points: int = 3) -> Box3:
    """Fit an oriented box to points.

    The heading follows the major axis of the xy covariance, extents are the bounds in that rotated frame
    floored at :data:`DIM_FLOOR` and the center is the midpoint of the bounds. Falls back to an axis aligned
    fit (yaw 0) for fewer than ``min_points`` points or a rank deficient covariance.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ConstraintViolationError("fit_box_pca needs at least one point")
    if not np.isfinite(pts).all():
        raise ConstraintViolationError("fit_box_pca points must be finite")

    yaw = principal_yaw(pts, min_points=min_points)
    if yaw is None:
        yaw = 0.0
    c, s = math.cos(yaw), math.sin(yaw)
    local_x = c * pts[:, 0] + s * pts[:, 1]
    local_y = -s * pts[:, 0] + c * pts[:, 1]

    lows = np.array([local_x.min(), local_y.min(), pts[:, 2].min()])
    highs = np.array([local_x.max(), local_y.max(), pts[:, 2].max()])
    mid = (lows + highs) / 2.0
    extents = np.maximum(highs - lows, DIM_FLOOR)

    return Box3(
        center=(c * mid[0] - s * mid[1], s * mid[0] + c * mid[1], mid[2]),
        dims=(float(extents[0]), float(extents[1]), float(extents[2])),
        yaw=yaw,
    )
