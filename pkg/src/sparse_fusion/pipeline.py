"""Use to detect objects in a scene from both LiDAR and camera queries."""

import logging
import os
import typing as t
from dataclasses import dataclass, field
from os.path import realpath
from sys import stdout

import numpy as np
import numpy.typing as npt
import typing_extensions as tx

from .assign_loss import (
    Assignment,
    LossBreakdown,
    assign_query_in_box,
    encode_target,
    focal_loss,
    l1_loss,
    two_round,
    vote_loss,
)
from .camera_query import make_camera_queries
from .config import PipelineConfig
from .geom3d import Box3, Vec3
from .lidar_query import (
    OracleScorer,
    OracleVoter,
    VoxelGrid,
    Votes,
    ccl_cluster,
    gt_membership,
    make_lidar_queries,
    voxelize,
)
from .query import Modality, Query
from .refine import (
    Detection,
    FinalBoxPredictor,
    PointContext,
    ReferenceBoxPredictor,
    ReferencePredictor,
    align_iteratively,
    dedup,
    predict_final,
)
from .scene_synth import Scene, derive_seed
from .types import SparseFusionAttributes, SparseFusionParams


FloatArray = npt.NDArray[np.float64]

STAGES: t.Tuple[str, ...] = (
    "points",
    "voxels",
    "foreground",
    "votes",
    "clusters",
    "lidar_queries",
    "camera_queries",
    "detections_raw",
    "detections",
)


@dataclass(frozen=True, eq=False)
class PipelineResult:
    """Every intermediate of one :meth:`SparseFusion.detect` run.

    ``reference_boxes``, ``aligned_queries`` and ``raw_detections`` run parallel to :attr:`queries`.
    """

    scores: FloatArray
    votes: Votes
    voxels: VoxelGrid
    lidar_queries: t.Tuple[Query, ...]
    camera_queries: t.Tuple[Query, ...]
    reference_boxes: t.Tuple[Box3, ...]
    aligned_queries: t.Tuple[Query, ...]
    raw_detections: t.Tuple[Detection, ...]
    detections: t.Tuple[Detection, ...]
    stage_counts: t.Dict[str, int] = field(default_factory=dict)

    @property
    def queries(self) -> t.Tuple[Query, ...]:
        return self.lidar_queries + self.camera_queries

    @property
    def live_elements(self) -> int:
        """Elements the sparse pipeline holds: points, occupied voxels, votes and query memberships."""
        return (
            int(self.scores.shape[0])
            + self.voxels.n_cells
            + len(self.votes)
            + sum(q.size for q in self.queries)
            + sum(q.size for q in self.aligned_queries)
        )


class SparseFusion(SparseFusionAttributes):
    """Use this class to run the bi-modal sparse detector on scenes."""

    def __init__(self, **kwargs: tx.Unpack[SparseFusionParams]) -> None:
        """Constructor."""
        self._config = kwargs.get("config") or PipelineConfig()

        self._classes = tuple(kwargs.get("classes") or ())

        self._scorer = kwargs.get("scorer") or OracleScorer(flip_prob=self._config.flip_prob)

        self._voter = kwargs.get("voter") or OracleVoter(
            fg_threshold=self._config.fg_threshold, sigma_m=self._config.vote_sigma_m
        )

        self._reference_predictor = kwargs.get("reference_predictor") or None

        self._final_predictor = kwargs.get("final_predictor") or FinalBoxPredictor(
            fg_threshold=self._config.fg_threshold, min_points=self._config.min_fit_points
        )

        self._quiet = bool(kwargs.get("quiet", False))

        self._logger = self._setup_logger(log_file=kwargs.get("log_file") or None, quiet=self._quiet)

    @classmethod
    def _setup_logger(
        cls, log_file: t.Optional[t.Union[str, "os.PathLike[t.Any]"]] = None, quiet: bool = False
    ) -> logging.Logger:
        formatter: logging.Formatter = logging.Formatter(
            fmt="%(asctime)s %(levelname)-8s %(message)s", datefmt="%Y-%m-%d %H:%M:%S"
        )
        logger: logging.Logger = logging.getLogger(cls.__name__)
        logger.setLevel(logging.DEBUG)

        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()

        if not quiet:
            screen_handler = logging.StreamHandler(stream=stdout)
            screen_handler.setFormatter(formatter)
            logger.addHandler(screen_handler)

        if log_file:
            file_handler = logging.FileHandler(realpath(log_file), mode="w")
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)

        return logger

    @property
    def config(self) -> PipelineConfig:
        return self._config

    @property
    def logger(self) -> logging.Logger:
        return self._logger

    def _reference_for(self, scene: Scene) -> ReferencePredictor:
        if self._reference_predictor is not None:
            return self._reference_predictor
        return ReferenceBoxPredictor(
            fg_threshold=self._config.fg_threshold,
            connect_radius_m=self._config.connect_radius_m,
            min_points=self._config.min_fit_points,
            shape_prior=self._config.shape_prior,
            classes=self._classes or scene.classes,
        )

    def detect(self, scene: Scene) -> PipelineResult:
        """Run both query paths, refine every query and deduplicate the detections."""
        config = self._config
        seed = derive_seed(config.seed, scene.seed)
        classes = self._classes or scene.classes

        scores = np.asarray(self._scorer(scene, seed), dtype=np.float64).reshape(-1)
        votes = self._voter(scene, scores, seed)
        voxels = voxelize(scene.points, config.voxel_size)

        lidar_queries: t.List[Query] = []
        n_clusters = 0
        if config.use_lidar_queries:
            clusters = ccl_cluster(votes, config.connect_radius_m, config.min_cluster_points)
            n_clusters = len(clusters)
            lidar_queries = make_lidar_queries(clusters, scene.points)

        camera_queries: t.List[Query] = []
        if config.use_camera_queries:
            camera_queries = make_camera_queries(
                scene.masks, scene.cameras, scene.points, scores, config.frustum(scene.range_m)
            )
            empty = scene.n_masks - len(camera_queries)
            if empty:
                self._logger.warning("%d of %d masks lifted an empty frustum", empty, scene.n_masks)

        context = PointContext(
            points=scene.points,
            scores=scores,
            voted_centers=votes.center_table(scene.points.shape[0]),
            cameras=scene.cameras,
        )
        predictor = self._reference_for(scene)
        reference_boxes: t.List[Box3] = []
        aligned_queries: t.List[Query] = []
        raw_detections: t.List[Detection] = []
        fallbacks = 0
        for query in lidar_queries + camera_queries:
            if config.align_queries:
                reference, aligned = align_iteratively(query, context, predictor, config.align_iterations)
                if aligned is query:
                    fallbacks += 1
            else:
                reference, aligned = predictor(query, context), query
            reference_boxes.append(reference)
            aligned_queries.append(aligned)
            raw_detections.append(
                predict_final(
                    aligned,
                    scene.points,
                    predictor=self._final_predictor,
                    classes=classes,
                    lidar_bonus=config.lidar_score_bonus,
                    camera_bonus=config.camera_score_bonus,
                    context=context,
                )
            )
        if fallbacks:
            self._logger.warning("%d queries kept their original points: reference box held no points", fallbacks)

        detections = dedup(raw_detections, config.dedup_dist_m)
        stage_counts = dict(
            zip(
                STAGES,
                (
                    int(scene.points.shape[0]),
                    voxels.n_cells,
                    int(np.count_nonzero(scores >= config.fg_threshold)),
                    len(votes),
                    n_clusters,
                    len(lidar_queries),
                    len(camera_queries),
                    len(raw_detections),
                    len(detections),
                ),
            )
        )
        self._logger.info(
            "scene %d: %d lidar queries, %d camera queries, %d detections kept of %d",
            scene.seed,
            len(lidar_queries),
            len(camera_queries),
            len(detections),
            len(raw_detections),
        )
        return PipelineResult(
            scores=scores,
            votes=votes,
            voxels=voxels,
            lidar_queries=tuple(lidar_queries),
            camera_queries=tuple(camera_queries),
            reference_boxes=tuple(reference_boxes),
            aligned_queries=tuple(aligned_queries),
            raw_detections=tuple(raw_detections),
            detections=tuple(detections),
            stage_counts=stage_counts,
        )

    def _assign(
        self, queries: t.Sequence[Query], scene: Scene, anchors: t.Optional[t.Sequence[Vec3]] = None
    ) -> Assignment:
        if self._config.assignment == "query_in_box":
            return assign_query_in_box(queries, scene.gt_boxes, anchors)
        return two_round(queries, scene.gt_boxes, scene.cameras, self._config.iou2d_threshold, anchors)

    def assign(self, scene: Scene, result: PipelineResult) -> t.Tuple[Assignment, Assignment]:
        """Labels of the generation stage (query positions) and the refinement stage (reference box centers)."""
        if not scene.gt:
            self._logger.warning("scene %d has no ground truth; every query is negative", scene.seed)
        generation = self._assign(result.queries, scene)
        refinement = self._assign(result.aligned_queries, scene, [box.center for box in result.reference_boxes])
        return generation, refinement

    def _regression(
        self,
        boxes: t.Sequence[Box3],
        anchors: t.Sequence[Vec3],
        assignment: Assignment,
        scene: Scene,
        selected: t.Sequence[int],
    ) -> float:
        losses = [
            l1_loss(
                encode_target(boxes[i], anchors[i]).as_array(),
                encode_target(scene.gt[assignment.gt_index[i]].box, anchors[i]).as_array(),
            )
            for i in selected
            if assignment.is_positive(i)
        ]
        return float(np.mean(losses)) if losses else 0.0

    def losses(
        self,
        scene: Scene,
        result: PipelineResult,
        assignments: t.Optional[t.Tuple[Assignment, Assignment]] = None,
    ) -> LossBreakdown:
        """The eight loss terms of one scene, computed from the deterministic predictions."""
        alpha, gamma = self._config.focal_alpha, self._config.focal_gamma
        generation, refinement = assignments or self.assign(scene, result)
        queries = result.queries
        positions = [q.position for q in queries]
        query_scores = [float(result.scores[q.point_indices].mean()) for q in queries]

        def by_modality(modality: Modality) -> t.List[int]:
            return [i for i, q in enumerate(queries) if q.modality is modality]

        def classification(indices: t.Sequence[int], probabilities: t.Sequence[float], labels: Assignment) -> float:
            return focal_loss(
                [probabilities[i] for i in indices],
                [1.0 if labels.is_positive(i) else 0.0 for i in indices],
                alpha,
                gamma,
            )

        lidar, camera = by_modality(Modality.LIDAR), by_modality(Modality.CAMERA)
        everything = range(len(queries))
        anchors = [box.center for box in result.reference_boxes]
        return LossBreakdown(
            seg=focal_loss(result.scores, gt_membership(scene).astype(np.float64), alpha, gamma),
            vote=vote_loss(result.votes, scene),
            cls_li=classification(lidar, query_scores, generation),
            reg_li=self._regression(result.reference_boxes, positions, generation, scene, lidar),
            cls_cam=classification(camera, query_scores, generation),
            reg_cam=self._regression(result.reference_boxes, positions, generation, scene, camera),
            cls_ref=classification(everything, [d.score for d in result.raw_detections], refinement),
            reg_ref=self._regression([d.box for d in result.raw_detections], anchors, refinement, scene, everything),
        )
