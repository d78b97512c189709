"""Query refinement shared by both modalities: features, reference boxes, re-crop alignment and final boxes."""

import logging
import math
import typing as t
from dataclasses import dataclass, field, replace

import numpy as np
import numpy.typing as npt
import typing_extensions as tx

from .exceptions import ConstraintViolationError
from .geom3d import Box3, CameraModel, bev_distance, fit_box_pca, iou2d, points_in_box3, project_box3
from .lidar_query import connected_labels
from .query import Modality, Query
from .scene_synth import MAX_CLASSES, ClassSpec


logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

FEATURE_DIM: int = 32
CLASS_SLOT: int = 12
MAX_CANDIDATE_GROUPS: int = 8


@dataclass(frozen=True, eq=False)
class PointContext:
    """Per-point evidence a predictor may look at.

    ``voted_centers`` has one row per point with NaN for points that cast no vote.
    """

    points: FloatArray
    scores: t.Optional[FloatArray] = None
    voted_centers: t.Optional[FloatArray] = None
    cameras: t.Tuple[CameraModel, ...] = ()


@dataclass(frozen=True)
class Detection:
    box: Box3
    class_id: int
    score: float
    provenance: Modality

    def __post_init__(self) -> None:
        score = float(self.score)
        if not math.isfinite(score) or not 0.0 <= score <= 1.0:
            raise ConstraintViolationError(f"Detection.score must be in [0, 1], got {self.score!r}")
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "provenance", Modality(self.provenance))


class ReferencePredictor(tx.Protocol):
    def __call__(self, query: Query, context: PointContext) -> Box3:
        ...


class FinalPredictor(tx.Protocol):
    def __call__(self, query: Query, context: PointContext) -> Box3:
        ...


def extract_features(query: Query, points: npt.ArrayLike, scores: t.Optional[npt.ArrayLike] = None) -> FloatArray:
    """Fixed length statistics of a query's member points, identical for both modalities.

    Layout: ``[0]`` log1p(count), ``[1:4]`` centroid, ``[4:7]`` extents in the principal frame,
    ``[7:9]`` xy covariance eigenvalues (descending), ``[9]`` z range, ``[10]`` mean and ``[11]`` max
    foreground score, ``[12:28]`` class hint one-hot, the rest zero.
    """
    members = np.asarray(points, dtype=np.float64).reshape(-1, 3)[query.point_indices]
    features = np.zeros(FEATURE_DIM, dtype=np.float64)
    features[0] = math.log1p(members.shape[0])
    features[1:4] = members.mean(axis=0)
    features[4:7] = fit_box_pca(members).dims
    centered = members[:, :2] - members[:, :2].mean(axis=0)
    cov = centered.T @ centered / members.shape[0]
    features[7:9] = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
    features[9] = members[:, 2].max() - members[:, 2].min()
    if scores is not None:
        member_scores = np.asarray(scores, dtype=np.float64).reshape(-1)[query.point_indices]
        features[10] = member_scores.mean()
        features[11] = member_scores.max()
    if query.class_hint is not None and 0 <= query.class_hint < MAX_CLASSES:
        features[CLASS_SLOT + query.class_hint] = 1.0
    return features


def _foreground(indices: IntArray, scores: t.Optional[FloatArray], threshold: float) -> IntArray:
    """Members scoring at least ``threshold``; all members when none does."""
    if scores is None:
        return indices
    kept = indices[scores[indices] >= threshold]
    return kept if kept.size else indices


def complete_to_prior(box: Box3, spec: ClassSpec) -> Box3:
    """Grow the footprint to at least the smallest plausible size of ``spec``, keeping center and heading."""
    long_side, short_side, _ = (d * (1.0 - spec.size_jitter) for d in spec.footprint)
    w, l, h = box.dims
    if w >= l:
        w, l = max(w, long_side), max(l, short_side)
    else:
        w, l = max(w, short_side), max(l, long_side)
    if (w, l) == box.dims[:2]:
        return box
    return Box3(box.center, (w, l, h), box.yaw)


@dataclass(frozen=True)
class ReferenceBoxPredictor:
    """Deterministic reference box predictor.

    Keeps the foreground members, splits them into groups connected through their voted centers, keeps the
    dominant group and fits a box to it. For a camera query the dominant group is the one whose projected box
    best overlaps the query's 2D box, among the heaviest groups; otherwise it is the heaviest group. With a
    class hint the footprint is completed to the class size prior.
    """

    fg_threshold: float = 0.5
    connect_radius_m: float = 0.5
    min_points: int = 3
    shape_prior: bool = True
    classes: t.Tuple[ClassSpec, ...] = field(default=())

    def _groups(self, kept: IntArray, context: PointContext) -> t.List[IntArray]:
        if context.voted_centers is None:
            return [kept]
        centers = context.voted_centers[kept]
        voted = np.isfinite(centers).all(axis=1)
        if not voted.any():
            return [kept]
        voters = kept[voted]
        unique_centers, node_of = np.unique(centers[voted], axis=0, return_inverse=True)
        labels = connected_labels(unique_centers, self.connect_radius_m)[np.asarray(node_of).reshape(-1)]
        order = np.argsort(labels, kind="stable")
        splits = np.flatnonzero(np.diff(labels[order])) + 1
        return [np.sort(voters[members]) for members in np.split(order, splits)]

    def _dominant(self, groups: t.List[IntArray], query: Query, context: PointContext) -> IntArray:
        if len(groups) == 1:
            return groups[0]
        position = np.asarray(query.position)

        def weight(group: IntArray) -> t.Tuple[float, float, int]:
            total = float(context.scores[group].sum()) if context.scores is not None else float(group.size)
            spread = float(np.linalg.norm(context.points[group].mean(axis=0) - position))
            return -total, spread, int(group[0])

        ranked = sorted(groups, key=weight)[:MAX_CANDIDATE_GROUPS]
        source = query.source_box2
        if source is None or source.camera_index >= len(context.cameras):
            return ranked[0]
        camera = context.cameras[source.camera_index]

        def overlap(group: IntArray) -> float:
            projected = project_box3(fit_box_pca(context.points[group], self.min_points), camera)
            return 0.0 if projected is None else iou2d(projected, source.box)

        best = max(range(len(ranked)), key=lambda k: (overlap(ranked[k]), -k))
        return ranked[best]

    def __call__(self, query: Query, context: PointContext) -> Box3:
        kept = _foreground(query.point_indices, context.scores, self.fg_threshold)
        group = self._dominant(self._groups(kept, context), query, context)
        box = fit_box_pca(context.points[group], self.min_points)
        if self.shape_prior and query.class_hint is not None:
            for spec in self.classes:
                if spec.class_id == query.class_hint:
                    return complete_to_prior(box, spec)
        return box


@dataclass(frozen=True)
class FinalBoxPredictor:
    """Fit a box to the foreground members of an aligned query."""

    fg_threshold: float = 0.5
    min_points: int = 3

    def __call__(self, query: Query, context: PointContext) -> Box3:
        kept = _foreground(query.point_indices, context.scores, self.fg_threshold)
        return fit_box_pca(context.points[kept], self.min_points)


def predict_reference_box(
    query: Query,
    points: npt.ArrayLike,
    predictor: t.Optional[ReferencePredictor] = None,
    context: t.Optional[PointContext] = None,
) -> Box3:
    """Reference box of ``query``; without a predictor it is ``fit_box_pca`` over the member points."""
    ctx = context if context is not None else PointContext(points=np.asarray(points, dtype=np.float64))
    if predictor is None:
        return fit_box_pca(ctx.points[query.point_indices])
    return predictor(query, ctx)


def align_query(query: Query, reference: Box3, points: npt.ArrayLike) -> Query:
    """Re-crop ``query`` to every scene point inside ``reference``; the query itself when the crop is empty."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.flatnonzero(points_in_box3(pts, reference))
    if inside.size == 0:
        return query
    centroid = pts[inside].mean(axis=0)
    return replace(
        query,
        point_indices=inside,
        position=(float(centroid[0]), float(centroid[1]), float(centroid[2])),
    )


def align_iteratively(
    query: Query,
    context: PointContext,
    predictor: ReferencePredictor,
    iterations: int = 2,
) -> t.Tuple[Box3, Query]:
    """Alternate reference prediction and re-cropping until the crop stops changing or ``iterations`` run out.

    Returns the reference box the final crop was taken with and the aligned query.
    """
    if iterations < 1:
        raise ConstraintViolationError(f"align_iterations must be >= 1, got {iterations!r}")
    reference = predictor(query, context)
    aligned = align_query(query, reference, context.points)
    for _ in range(iterations - 1):
        next_reference = predictor(aligned, context)
        realigned = align_query(aligned, next_reference, context.points)
        if np.array_equal(realigned.point_indices, aligned.point_indices):
            break
        reference, aligned = next_reference, realigned
    return reference, aligned


def nearest_class(box: Box3, classes: t.Sequence[ClassSpec]) -> int:
    """Class whose size prior is nearest in L2 over ``(max(w, l), min(w, l), h)``; ties go to the lower id."""
    if not classes:
        raise ConstraintViolationError("cannot classify a box without class specs")
    signature = np.asarray(box.footprint)
    ranked = sorted(classes, key=lambda c: (float(np.linalg.norm(signature - np.asarray(c.footprint))), c.class_id))
    return ranked[0].class_id


def predict_final(
    aligned: Query,
    points: npt.ArrayLike,
    scores: t.Optional[npt.ArrayLike] = None,
    predictor: t.Optional[FinalPredictor] = None,
    classes: t.Sequence[ClassSpec] = (),
    lidar_bonus: float = 0.9,
    camera_bonus: float = 1.0,
    context: t.Optional[PointContext] = None,
) -> Detection:
    """Final box, class and score of an aligned query.

    The class is the query's class hint when present, else :func:`nearest_class`. The score is the mean
    member foreground score times the provenance bonus, clamped to [0, 1]; 0 without scores.
    """
    if context is None:
        context = PointContext(
            points=np.asarray(points, dtype=np.float64).reshape(-1, 3),
            scores=None if scores is None else np.asarray(scores, dtype=np.float64).reshape(-1),
        )
    box = (predictor or FinalBoxPredictor())(aligned, context)
    class_id = aligned.class_hint if aligned.class_hint is not None else nearest_class(box, classes)
    if context.scores is None or context.scores.size == 0:
        score = 0.0
    else:
        bonus = camera_bonus if aligned.modality is Modality.CAMERA else lidar_bonus
        score = min(1.0, max(0.0, float(context.scores[aligned.point_indices].mean()) * bonus))
    return Detection(box=box, class_id=class_id, score=score, provenance=aligned.modality)


def dedup(detections: t.Sequence[Detection], bev_center_dist_m: float = 1.0) -> t.List[Detection]:
    """Greedy suppression in descending score order (ties: lower class id, then input order).

    A detection is dropped when an already kept detection of the same class lies closer than
    ``bev_center_dist_m`` in bird's-eye view.
    """
    if not bev_center_dist_m > 0:
        raise ConstraintViolationError(f"dedup_dist_m must be positive, got {bev_center_dist_m!r}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, detections[i].class_id, i))
    kept: t.List[Detection] = []
    for index in order:
        candidate = detections[index]
        if any(
            k.class_id == candidate.class_id and bev_distance(k.box.center, candidate.box.center) < bev_center_dist_m
            for k in kept
        ):
            continue
        kept.append(candidate)
    return kept
