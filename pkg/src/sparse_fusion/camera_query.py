"""Camera queries: lift instance masks into frustum point clusters."""

import logging
import typing as t
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .exceptions import ConstraintViolationError
from .geom3d import CameraModel, nearest_pixels, project_points
from .query import Modality, Query, SourceBox
from .scene_synth import InstanceMask, MasksPerCamera


logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

FAR_CLIP_FACTOR: float = 1.2


@dataclass(frozen=True)
class FrustumParams:
    depth_min_m: float = 0.5
    depth_max_m: float = FAR_CLIP_FACTOR * 54.0
    score_floor: float = 1e-3

    def __post_init__(self) -> None:
        if not 0.0 < self.depth_min_m < self.depth_max_m:
            raise ConstraintViolationError(
                f"frustum depth bounds must satisfy 0 < depth_min_m < depth_max_m, "
                f"got {self.depth_min_m!r} and {self.depth_max_m!r}"
            )
        if not self.score_floor > 0.0:
            raise ConstraintViolationError(f"score_floor must be positive, got {self.score_floor!r}")

    @classmethod
    def for_range(cls, range_m: float, depth_min_m: float = 0.5, score_floor: float = 1e-3) -> "FrustumParams":
        return cls(depth_min_m=depth_min_m, depth_max_m=FAR_CLIP_FACTOR * range_m, score_floor=score_floor)


@dataclass(frozen=True, eq=False)
class ProjectedCloud:
    """Every scene point's pixel in one camera: ``pixel`` is the flat row-major index or -1 when off image."""

    pixel: IntArray
    depth: FloatArray


def project_cloud(points: npt.ArrayLike, camera: CameraModel) -> ProjectedCloud:
    uv, depth = project_points(points, camera)
    pixel = np.full(depth.shape[0], -1, dtype=np.int64)
    where, rows, cols = nearest_pixels(uv, camera)
    pixel[where] = rows * camera.image_w + cols
    return ProjectedCloud(pixel=pixel, depth=depth)


def lift_mask(
    mask: InstanceMask,
    camera: CameraModel,
    points: npt.ArrayLike,
    params: FrustumParams,
    projected: t.Optional[ProjectedCloud] = None,
) -> t.Optional[IntArray]:
    """Indices of the points whose nearest pixel is set in ``mask`` and whose depth is within the frustum.

    ``None`` when no point qualifies.
    """
    if not mask.bitmap.any():
        raise ConstraintViolationError("cannot lift an empty mask")
    if mask.bitmap.shape != (camera.image_h, camera.image_w):
        raise ConstraintViolationError(
            f"mask shape {mask.bitmap.shape} does not match camera image {(camera.image_h, camera.image_w)}"
        )
    cloud = projected if projected is not None else project_cloud(points, camera)
    candidates = np.flatnonzero(
        (cloud.pixel >= 0) & (cloud.depth >= params.depth_min_m) & (cloud.depth <= params.depth_max_m)
    )
    selected = candidates[mask.bitmap.reshape(-1)[cloud.pixel[candidates]]]
    if selected.size == 0:
        return None
    return selected.astype(np.int64)


def weighted_centroid(points: FloatArray, scores: FloatArray, score_floor: float) -> t.Tuple[float, float, float]:
    weights = np.maximum(score_floor, scores)
    centroid = (weights[:, None] * points).sum(axis=0) / weights.sum()
    return float(centroid[0]), float(centroid[1]), float(centroid[2])


def make_camera_queries(
    masks: MasksPerCamera,
    cameras: t.Sequence[CameraModel],
    points: npt.ArrayLike,
    scores: npt.ArrayLike,
    params: FrustumParams,
) -> t.List[Query]:
    """One camera query per mask with a non-empty frustum, ordered by ``(camera_index, mask order)``.

    A point inside several masks is copied into each of their queries. The query position is the centroid
    weighted by ``max(score_floor, score)``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    score = np.asarray(scores, dtype=np.float64).reshape(-1)
    if score.shape[0] != pts.shape[0]:
        raise ConstraintViolationError("scores must have one entry per point")

    queries: t.List[Query] = []
    for camera_index, per_camera in enumerate(masks):
        if not per_camera:
            continue
        camera = cameras[camera_index]
        cloud = project_cloud(pts, camera)
        for mask in per_camera:
            indices = lift_mask(mask, camera, pts, params, projected=cloud)
            if indices is None:
                logger.debug("camera %d mask of instance %d lifted no points", camera_index, mask.instance_id)
                continue
            queries.append(
                Query(
                    point_indices=indices,
                    modality=Modality.CAMERA,
                    position=weighted_centroid(pts[indices], score[indices], params.score_floor),
                    source_box2=SourceBox(camera_index, mask.bbox2),
                    class_hint=mask.class_id,
                )
            )
    return queries
