import math
import typing as t
from dataclasses import fields

import numpy as np
import pytest

from sparse_fusion.assign_loss import (
    NEGATIVE,
    Assignment,
    LossBreakdown,
    RegressionTarget,
    Round,
    assign_2d,
    assign_3d,
    assign_query_in_box,
    decode_target,
    encode_target,
    focal_loss,
    l1_loss,
    oracle_head_detections,
    total_loss,
    two_round,
    vote_loss,
)
from sparse_fusion.camera_query import FrustumParams, make_camera_queries
from sparse_fusion.exceptions import ConstraintViolationError
from sparse_fusion.geom3d import Box2, Box3, angular_distance, project_box3
from sparse_fusion.lidar_query import Votes, ccl_cluster, gt_membership, make_lidar_queries, oracle_vote
from sparse_fusion.query import Modality, Query, SourceBox
from sparse_fusion.scene_synth import GroundTruth, Scene
from tests.conftest import Helpers
from tests.factories import Box3Factory


def _point_query(position: t.Sequence[float], modality: Modality = Modality.LIDAR, **kwargs: t.Any) -> Query:
    return Query(point_indices=[0], modality=modality, position=tuple(position), **kwargs)


def _scene_queries(scene: Scene) -> t.List[Query]:
    scores = gt_membership(scene).astype(float)
    votes = oracle_vote(scene, scene.points, scores)
    lidar = make_lidar_queries(ccl_cluster(votes), scene.points)
    camera = make_camera_queries(
        scene.masks, scene.cameras, scene.points, scores, FrustumParams.for_range(scene.range_m)
    )
    return lidar + camera


@pytest.mark.assign
class TestAssign3D:
    def test_query_at_a_center(self) -> None:
        box = Box3((10.0, 0.0, 1.0), (2.0, 4.0, 2.0))
        assignment = assign_3d([_point_query(box.center)], [box])
        assert assignment.gt_index == (0,)
        assert assignment.rounds == (Round.R3D,)

    def test_query_outside_every_box(self) -> None:
        assignment = assign_3d([_point_query((50.0, 50.0, 0.0))], [Box3((10.0, 0.0, 1.0), (2.0, 4.0, 2.0))])
        assert assignment.gt_index == (NEGATIVE,)
        assert assignment.rounds == (Round.NONE,)
        assert assignment.positives == []

    def test_overlapping_boxes_go_to_the_nearer_center(self) -> None:
        far = Box3((2.0, 0.0, 0.0), (6.0, 6.0, 6.0))
        near = Box3((1.0, 0.0, 0.0), (6.0, 6.0, 6.0))
        assert assign_3d([_point_query((0.0, 0.0, 0.0))], [far, near]).gt_index == (1,)

    def test_equal_distances_go_to_the_lower_index(self) -> None:
        left = Box3((-1.0, 0.0, 0.0), (4.0, 4.0, 4.0))
        right = Box3((1.0, 0.0, 0.0), (4.0, 4.0, 4.0))
        assert assign_3d([_point_query((0.0, 0.0, 0.0))], [left, right]).gt_index == (0,)

    def test_anchors_replace_positions(self) -> None:
        box = Box3((10.0, 0.0, 1.0), (2.0, 2.0, 2.0))
        query = _point_query((0.0, 0.0, 0.0))
        assert assign_3d([query], [box], anchors=[box.center]).gt_index == (0,)
        with pytest.raises(ConstraintViolationError):
            assign_3d([query], [box], anchors=[])

    def test_no_ground_truth(self) -> None:
        assert assign_query_in_box([_point_query((0.0, 0.0, 0.0))], []) == Assignment.negative(1)


@pytest.mark.assign
class TestAssign2D:
    def test_identical_box_is_assigned(self, helpers: t.Type[Helpers]) -> None:
        camera = helpers.front_camera()
        gt = Box3((15.0, 1.0, 0.85), (0.6, 0.6, 1.7))
        projected = project_box3(gt, camera)
        query = _point_query((40.0, 0.0, 0.0), Modality.CAMERA, source_box2=SourceBox(0, projected))
        assignment = assign_2d([query], [gt], [camera])
        assert assignment.gt_index == (0,)
        assert assignment.rounds == (Round.R2D,)

    def test_no_overlap_is_negative(self, helpers: t.Type[Helpers]) -> None:
        gt = Box3((15.0, 1.0, 0.85), (0.6, 0.6, 1.7))
        query = _point_query((15.0, 1.0, 0.85), Modality.CAMERA, source_box2=SourceBox(0, Box2(0, 0, 5, 5)))
        assert assign_2d([query], [gt], [helpers.front_camera()]).gt_index == (NEGATIVE,)

    def test_lidar_queries_never_match(self, helpers: t.Type[Helpers]) -> None:
        gt = Box3((15.0, 1.0, 0.85), (0.6, 0.6, 1.7))
        assert assign_2d([_point_query((40.0, 0.0, 0.0))], [gt], [helpers.front_camera()]).positives == []

    def test_invalid_threshold(self, helpers: t.Type[Helpers]) -> None:
        with pytest.raises(ConstraintViolationError):
            assign_2d([], [], [helpers.front_camera()], iou_threshold=1.5)


@pytest.mark.assign
class TestTwoRound:
    def test_query_pushed_along_the_ray(self, helpers: t.Type[Helpers]) -> None:
        camera = helpers.front_camera()
        gt = Box3((15.0, 0.0, 0.85), (0.6, 0.6, 1.7))
        ray = gt.center_array - camera.position
        position = gt.center_array + 3.0 * ray / np.linalg.norm(ray)
        query = _point_query(position, Modality.CAMERA, source_box2=SourceBox(0, project_box3(gt, camera)))

        first_round = assign_query_in_box([query], [gt])
        both_rounds = two_round([query], [gt], [camera], iou_threshold=0.5)
        assert first_round.gt_index == (NEGATIVE,)
        assert both_rounds.gt_index == (0,)
        assert both_rounds.rounds == (Round.R2D,)

    def test_second_round_is_idle_when_every_query_is_inside(self, small_scene: Scene) -> None:
        boxes = small_scene.gt_boxes
        queries = [_point_query(b.center) for b in boxes]
        assert two_round(queries, boxes, small_scene.cameras) == assign_3d(queries, boxes)

    def test_lidar_query_outside_stays_negative(self, small_scene: Scene) -> None:
        assignment = two_round([_point_query((500.0, 0.0, 0.0))], small_scene.gt_boxes, small_scene.cameras)
        assert assignment == Assignment.negative(1)

    def test_positives_are_the_disjoint_union_of_both_rounds(self, small_scene: Scene, default_scene: Scene) -> None:
        for scene in (small_scene, default_scene):
            queries = _scene_queries(scene)
            boxes = scene.gt_boxes
            first = assign_3d(queries, boxes)
            leftover = [not first.is_positive(i) for i in range(len(queries))]
            second = assign_2d(queries, boxes, scene.cameras, 0.5, pending=leftover)
            combined = two_round(queries, boxes, scene.cameras, 0.5)
            assert not set(first.positives) & set(second.positives)
            assert set(combined.positives) == set(first.positives) | set(second.positives)
            for i in combined.positives:
                expected = first if first.is_positive(i) else second
                assert combined.gt_index[i] == expected.gt_index[i]
                assert combined.rounds[i] is expected.rounds[i]

    def test_assignment_validates_rounds(self) -> None:
        with pytest.raises(ConstraintViolationError):
            Assignment((0,), (Round.NONE,))
        with pytest.raises(ConstraintViolationError):
            Assignment((0, 1), (Round.R3D,))


@pytest.mark.assign
class TestTargets:
    def test_identity(self) -> None:
        target = encode_target(Box3((1.0, 2.0, 3.0), (1.0, 1.0, 1.0), 0.0), (1.0, 2.0, 3.0))
        assert target == RegressionTarget(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0)

    def test_quarter_turn(self) -> None:
        target = encode_target(Box3((0, 0, 0), (1, 1, 1), math.pi / 2), (0, 0, 0))
        assert (target.sin_ry, target.cos_ry) == pytest.approx((1.0, 0.0))

    def test_round_trip(self, rng: np.random.Generator) -> None:
        for _ in range(1000):
            gt = Box3Factory()
            anchor = tuple(rng.uniform(-50, 50, size=3))
            decoded = decode_target(encode_target(gt, anchor), anchor)
            assert np.allclose(decoded.center, gt.center, rtol=0.0, atol=1e-9)
            assert np.allclose(decoded.dims, gt.dims, rtol=0.0, atol=1e-9)
            assert angular_distance(decoded.yaw, gt.yaw) < 1e-9

    def test_zero_target(self) -> None:
        box = decode_target([0.0] * 8, (4.0, 5.0, 6.0))
        assert box == Box3((4.0, 5.0, 6.0), (1.0, 1.0, 1.0), 0.0)

    def test_unnormalised_heading(self) -> None:
        box = decode_target([0, 0, 0, 0, 0, 0, 2.0, 0.0], (0.0, 0.0, 0.0))
        assert box.yaw == pytest.approx(math.pi / 2)

    def test_decode_then_encode(self, rng: np.random.Generator) -> None:
        for _ in range(200):
            target = np.concatenate([rng.uniform(-5, 5, 3), rng.uniform(-2, 2, 3), rng.uniform(-3, 3, 2)])
            anchor = rng.uniform(-20, 20, 3)
            again = encode_target(decode_target(target, anchor), anchor).as_array()
            norm = math.hypot(target[6], target[7])
            assert np.allclose(again[:6], target[:6], rtol=0.0, atol=1e-9)
            assert np.allclose(again[6:], target[6:] / norm, rtol=0.0, atol=1e-9)

    @pytest.mark.parametrize(
        "target",
        [
            pytest.param([0.0] * 7, id="short"),
            pytest.param([0, 0, 0, 0, 0, 0, math.nan, 1.0], id="nan"),
            pytest.param([0, 0, 0, 1000.0, 0, 0, 0, 1.0], id="overflowing dims"),
        ],
    )
    def test_invalid_target(self, target: t.List[float]) -> None:
        with pytest.raises(ConstraintViolationError):
            decode_target(target, (0.0, 0.0, 0.0))


def _focal_reference(probs: t.Sequence[float], labels: t.Sequence[int], alpha: float, gamma: float) -> float:
    total = 0.0
    for p, y in zip(probs, labels):
        p = min(max(p, 1e-7), 1.0 - 1e-7)
        if y == 1:
            total += -alpha * (1.0 - p) ** gamma * math.log(p)
        else:
            total += -alpha * p**gamma * math.log(1.0 - p)
    return total / len(probs)


@pytest.mark.assign
class TestLosses:
    def test_l1_of_equal_vectors(self) -> None:
        assert l1_loss([1.0, -2.0, 3.5], [1.0, -2.0, 3.5]) == 0.0

    def test_l1_is_a_mean(self) -> None:
        assert l1_loss([0.0, 0.0], [1.0, -3.0]) == pytest.approx(2.0)

    def test_l1_shape_mismatch(self) -> None:
        with pytest.raises(ConstraintViolationError):
            l1_loss([0.0], [0.0, 1.0])

    def test_focal_without_focusing_is_cross_entropy(self, rng: np.random.Generator) -> None:
        for _ in range(100):
            n = int(rng.integers(1, 60))
            probs = rng.uniform(0.01, 0.99, size=n)
            labels = rng.integers(0, 2, size=n)
            cross_entropy = float(np.mean(-np.log(np.where(labels == 1, probs, 1.0 - probs))))
            assert abs(focal_loss(probs, labels, alpha=1.0, gamma=0.0) - cross_entropy) < 1e-9

    def test_focal_without_focusing_on_mixed_labels(self) -> None:
        probs, labels = [0.7, 0.2, 0.9, 0.4], [1, 0, 1, 0]
        cross_entropy = -(math.log(0.7) + math.log(0.8) + math.log(0.9) + math.log(0.6)) / 4
        assert focal_loss(probs, labels, alpha=1.0, gamma=0.0) == pytest.approx(cross_entropy, abs=1e-9)

    def test_alpha_scales_every_sample(self, rng: np.random.Generator) -> None:
        probs = rng.uniform(0.01, 0.99, size=40)
        labels = rng.integers(0, 2, size=40)
        unit = focal_loss(probs, labels, alpha=1.0, gamma=2.0)
        assert focal_loss(probs, labels, alpha=0.25, gamma=2.0) == pytest.approx(0.25 * unit, abs=1e-12)

    def test_focal_matches_reference(self, rng: np.random.Generator) -> None:
        for _ in range(100):
            n = int(rng.integers(1, 30))
            logits = rng.normal(scale=4.0, size=n)
            probs = 1.0 / (1.0 + np.exp(-logits))
            labels = rng.integers(0, 2, size=n)
            alpha, gamma = float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.0, 4.0))
            expected = _focal_reference(probs.tolist(), labels.tolist(), alpha, gamma)
            assert abs(focal_loss(probs, labels, alpha, gamma) - expected) < 1e-6

    def test_focal_of_empty_batch(self) -> None:
        assert focal_loss([], []) == 0.0

    def test_confident_predictions_cost_less(self) -> None:
        assert focal_loss([0.95], [1]) < focal_loss([0.6], [1])

    def test_total_of_zero_parts(self) -> None:
        assert total_loss(LossBreakdown()) == 0.0

    def test_total_of_one_part(self) -> None:
        assert total_loss(LossBreakdown(reg_cam=1.5)) == 1.5

    def test_total_matches_accumulation(self, rng: np.random.Generator) -> None:
        for _ in range(50):
            values = rng.uniform(0, 10, size=8)
            parts = LossBreakdown(*values.tolist())
            expected = 0.0
            for value in values.tolist():
                expected += value
            assert abs(total_loss(parts) - expected) < 1e-12
            assert parts.as_dict()["total"] == parts.total
            assert set(parts.as_dict()) == {f.name for f in fields(LossBreakdown)} | {"total"}

    def test_negative_part_is_rejected(self) -> None:
        with pytest.raises(ConstraintViolationError):
            total_loss(LossBreakdown(seg=-1.0))

    def test_vote_loss(self, small_scene: Scene) -> None:
        scores = gt_membership(small_scene).astype(float)
        votes = oracle_vote(small_scene, small_scene.points, scores)
        assert vote_loss(votes, small_scene) == 0.0
        shifted = Votes(votes.point_indices, votes.centers + np.array([0.3, 0.0, 0.0]), votes.points)
        assert vote_loss(shifted, small_scene) == pytest.approx(0.1)
        spread = Votes(votes.point_indices, votes.centers + np.array([0.1, -0.2, 0.3]), votes.points)
        assert vote_loss(spread, small_scene) == pytest.approx(l1_loss([0.1, -0.2, 0.3], [0.0, 0.0, 0.0]))
        assert vote_loss(Votes.empty(), small_scene) == 0.0


@pytest.mark.assign
class TestOracleHead:
    def test_positives_reproduce_their_ground_truth(self, small_scene: Scene) -> None:
        queries = _scene_queries(small_scene)
        assignment = two_round(queries, small_scene.gt_boxes, small_scene.cameras)
        detections = oracle_head_detections(queries, assignment, small_scene.gt)
        assert len(detections) == len(assignment.positives)
        for detection, index in zip(detections, assignment.positives):
            gt: GroundTruth = small_scene.gt[assignment.gt_index[index]]
            assert np.allclose(detection.box.center, gt.box.center, atol=1e-9)
            assert np.allclose(detection.box.dims, gt.box.dims, atol=1e-9)
            assert detection.class_id == gt.class_id
            assert detection.score == 1.0
            assert detection.provenance is queries[index].modality
