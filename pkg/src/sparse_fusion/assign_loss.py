"""Two-round label assignment, regression target encoding and the loss stack."""

import enum
import math
import typing as t
from dataclasses import dataclass, fields

import numpy as np
import numpy.typing as npt

from .exceptions import ConstraintViolationError
from .geom3d import DIM_FLOOR, Box2, Box3, CameraModel, Vec3, iou2d, points_in_box3, project_box3
from .lidar_query import Votes
from .query import Modality, Query
from .refine import Detection
from .scene_synth import BACKGROUND, GroundTruth, Scene


NEGATIVE: int = -1
PROB_CLIP: float = 1e-7


class Round(str, enum.Enum):
    R3D = "R3D"
    R2D = "R2D"
    NONE = "NONE"


@dataclass(frozen=True)
class Assignment:
    """Per query: the assigned ground truth index (or :data:`NEGATIVE`) and the round that decided it."""

    gt_index: t.Tuple[int, ...]
    rounds: t.Tuple[Round, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "gt_index", tuple(int(g) for g in self.gt_index))
        object.__setattr__(self, "rounds", tuple(Round(r) for r in self.rounds))
        if len(self.gt_index) != len(self.rounds):
            raise ConstraintViolationError("Assignment.gt_index and Assignment.rounds must have equal length")
        for gt_index, assigned_round in zip(self.gt_index, self.rounds):
            if (gt_index == NEGATIVE) != (assigned_round is Round.NONE):
                raise ConstraintViolationError("Assignment round must be NONE exactly for NEGATIVE queries")

    @classmethod
    def negative(cls, n: int) -> "Assignment":
        return cls((NEGATIVE,) * n, (Round.NONE,) * n)

    def __len__(self) -> int:
        return len(self.gt_index)

    @property
    def positives(self) -> t.List[int]:
        return [i for i, g in enumerate(self.gt_index) if g != NEGATIVE]

    def is_positive(self, index: int) -> bool:
        return self.gt_index[index] != NEGATIVE


def _anchor_positions(queries: t.Sequence[Query], anchors: t.Optional[t.Sequence[Vec3]]) -> npt.NDArray[np.float64]:
    if anchors is None:
        return np.array([q.position for q in queries], dtype=np.float64).reshape(-1, 3)
    if len(anchors) != len(queries):
        raise ConstraintViolationError("anchors must have one entry per query")
    return np.array(anchors, dtype=np.float64).reshape(-1, 3)


def assign_3d(
    queries: t.Sequence[Query],
    gts: t.Sequence[Box3],
    anchors: t.Optional[t.Sequence[Vec3]] = None,
) -> Assignment:
    """Query-in-box round for both modalities.

    A query is positive when its position (or its anchor, at the refinement stage) lies in a ground truth
    box; inside several boxes it goes to the nearest center, ties to the lowest index.
    """
    positions = _anchor_positions(queries, anchors)
    n = positions.shape[0]
    if not gts or n == 0:
        return Assignment.negative(n)
    inside = np.column_stack([points_in_box3(positions, box) for box in gts])
    centers = np.array([box.center for box in gts], dtype=np.float64)
    distance = np.linalg.norm(positions[:, None, :] - centers[None, :, :], axis=-1)
    distance[~inside] = np.inf

    gt_index = [NEGATIVE] * n
    rounds = [Round.NONE] * n
    for i in np.flatnonzero(inside.any(axis=1)):
        gt_index[i] = int(np.argmin(distance[i]))
        rounds[i] = Round.R3D
    return Assignment(tuple(gt_index), tuple(rounds))


def assign_query_in_box(
    queries: t.Sequence[Query],
    gts: t.Sequence[Box3],
    anchors: t.Optional[t.Sequence[Vec3]] = None,
) -> Assignment:
    """The 3D round alone; every query left over is negative."""
    return assign_3d(queries, gts, anchors)


def assign_2d(
    queries: t.Sequence[Query],
    gts: t.Sequence[Box3],
    cameras: t.Sequence[CameraModel],
    iou_threshold: float = 0.5,
    pending: t.Optional[t.Sequence[bool]] = None,
) -> Assignment:
    """Max-IoU round for camera queries.

    Every ground truth is projected into the query's source camera and compared with the query's 2D box; the
    best match wins when its IoU reaches ``iou_threshold``. Several queries may share a ground truth. Only
    queries flagged in ``pending`` (all by default) are considered; LiDAR queries never match.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ConstraintViolationError(f"iou2d_threshold must be in [0, 1], got {iou_threshold!r}")
    n = len(queries)
    todo = [True] * n if pending is None else list(pending)
    if len(todo) != n:
        raise ConstraintViolationError("pending must have one entry per query")

    projections: t.Dict[int, t.List[t.Optional[Box2]]] = {}
    gt_index = [NEGATIVE] * n
    rounds = [Round.NONE] * n
    for i, query in enumerate(queries):
        if not todo[i] or query.modality is not Modality.CAMERA or not gts:
            continue
        if query.source_box2 is None:
            raise ConstraintViolationError("camera query without source_box2")
        camera_index = query.source_box2.camera_index
        if camera_index not in projections:
            projections[camera_index] = [project_box3(box, cameras[camera_index]) for box in gts]
        ious = [0.0 if p is None else iou2d(query.source_box2.box, p) for p in projections[camera_index]]
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold and ious[best] > 0.0:
            gt_index[i] = best
            rounds[i] = Round.R2D
    return Assignment(tuple(gt_index), tuple(rounds))


def two_round(
    queries: t.Sequence[Query],
    gts: t.Sequence[Box3],
    cameras: t.Sequence[CameraModel],
    iou_threshold: float = 0.5,
    anchors: t.Optional[t.Sequence[Vec3]] = None,
) -> Assignment:
    """3D round first, then the 2D round on the camera queries it left unassigned."""
    first = assign_3d(queries, gts, anchors)
    second = assign_2d(
        queries, gts, cameras, iou_threshold, pending=[r is Round.NONE for r in first.rounds]
    )
    gt_index = tuple(a if a != NEGATIVE else b for a, b in zip(first.gt_index, second.gt_index))
    rounds = tuple(a if a is not Round.NONE else b for a, b in zip(first.rounds, second.rounds))
    return Assignment(gt_index, rounds)


class RegressionTarget(t.NamedTuple):
    dx: float
    dy: float
    dz: float
    log_w: float
    log_l: float
    log_h: float
    sin_ry: float
    cos_ry: float

    def as_array(self) -> npt.NDArray[np.float64]:
        return np.array(self, dtype=np.float64)


def encode_target(gt: Box3, anchor_pos: t.Sequence[float]) -> RegressionTarget:
    return RegressionTarget(
        gt.center[0] - anchor_pos[0],
        gt.center[1] - anchor_pos[1],
        gt.center[2] - anchor_pos[2],
        math.log(gt.dims[0]),
        math.log(gt.dims[1]),
        math.log(gt.dims[2]),
        math.sin(gt.yaw),
        math.cos(gt.yaw),
    )


def decode_target(target: t.Sequence[float], anchor_pos: t.Sequence[float]) -> Box3:
    values = [float(v) for v in target]
    anchor = [float(a) for a in anchor_pos]
    if len(values) != 8 or len(anchor) != 3:
        raise ConstraintViolationError("decode_target needs 8 target components and a 3D anchor")
    if not all(math.isfinite(v) for v in values + anchor):
        raise ConstraintViolationError(f"decode_target inputs must be finite, got {values!r} at {anchor!r}")
    dx, dy, dz, log_w, log_l, log_h, sin_ry, cos_ry = values
    try:
        dims = tuple(max(math.exp(v), DIM_FLOOR) for v in (log_w, log_l, log_h))
    except OverflowError as err:
        raise ConstraintViolationError(f"decoded dimensions overflow: {values[3:6]!r}") from err
    return Box3(
        center=(anchor[0] + dx, anchor[1] + dy, anchor[2] + dz),
        dims=dims,  # type: ignore[arg-type]
        yaw=math.atan2(sin_ry, cos_ry),
    )


def l1_loss(pred: t.Sequence[float], tgt: t.Sequence[float]) -> float:
    """Mean absolute difference over the regression components."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(tgt, dtype=np.float64)
    if a.shape != b.shape:
        raise ConstraintViolationError(f"l1_loss shapes differ: {a.shape} and {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean(np.abs(a - b)))


def focal_loss(
    pred_probs: npt.ArrayLike, labels: npt.ArrayLike, alpha: float = 0.25, gamma: float = 2.0
) -> float:
    """Mean binary focal loss ``-alpha * (1 - p_t) ** gamma * log(p_t)``.

    ``alpha`` scales every sample and ``p_t`` is the probability given to the true label, so ``alpha=1`` with
    ``gamma=0`` is plain cross-entropy. Probabilities are clipped to ``[1e-7, 1 - 1e-7]``. An empty batch has zero
    loss.
    """
    p = np.clip(np.asarray(pred_probs, dtype=np.float64).reshape(-1), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ConstraintViolationError(f"focal_loss needs one label per probability, got {p.shape} and {y.shape}")
    if p.size == 0:
        return 0.0
    positive = y >= 0.5
    p_t = np.where(positive, p, 1.0 - p)
    return float(np.mean(-alpha * (1.0 - p_t) ** gamma * np.log(p_t)))


@dataclass(frozen=True)
class LossBreakdown:
    seg: float = 0.0
    vote: float = 0.0
    cls_li: float = 0.0
    reg_li: float = 0.0
    cls_cam: float = 0.0
    reg_cam: float = 0.0
    cls_ref: float = 0.0
    reg_ref: float = 0.0

    @property
    def total(self) -> float:
        return total_loss(self)

    def as_dict(self) -> t.Dict[str, float]:
        parts = {f.name: float(getattr(self, f.name)) for f in fields(self)}
        parts["total"] = self.total
        return parts


def total_loss(parts: LossBreakdown) -> float:
    """Unweighted sum of the eight terms."""
    total = 0.0
    for f in fields(parts):
        value = float(getattr(parts, f.name))
        if not math.isfinite(value) or value < 0.0:
            raise ConstraintViolationError(f"loss term {f.name} must be a finite non-negative value, got {value!r}")
        total += value
    return total


def vote_loss(votes: Votes, scene: Scene) -> float:
    """Mean L1 between voted and true centers over the votes cast by true foreground points.

    As in :func:`l1_loss`, a vote's error is averaged over its x, y and z components.
    """
    if len(votes) == 0:
        return 0.0
    instances = scene.point_instance[votes.point_indices]
    errors: t.List[npt.NDArray[np.float64]] = []
    for g in scene.gt:
        mine = instances == g.instance_id
        if mine.any():
            errors.append(np.abs(votes.centers[mine] - g.box.center_array).mean(axis=1))
    if not errors or np.count_nonzero(instances != BACKGROUND) == 0:
        return 0.0
    return float(np.concatenate(errors).mean())


def oracle_head_detections(
    queries: t.Sequence[Query],
    assignment: Assignment,
    gts: t.Sequence[GroundTruth],
    anchors: t.Optional[t.Sequence[Vec3]] = None,
) -> t.List[Detection]:
    """Detections of an ideal head trained under ``assignment``.

    Every positive query regresses its assigned ground truth exactly from its anchor, with that ground
    truth's class and score 1; negatives emit nothing.
    """
    positions = _anchor_positions(queries, anchors)
    detections: t.List[Detection] = []
    for i in assignment.positives:
        gt = gts[assignment.gt_index[i]]
        anchor = positions[i]
        detections.append(
            Detection(
                box=decode_target(encode_target(gt.box, anchor), anchor),
                class_id=gt.class_id,
                score=1.0,
                provenance=queries[i].modality,
            )
        )
    return detections
