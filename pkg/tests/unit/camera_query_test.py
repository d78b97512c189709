import typing as t

import numpy as np
import pytest

from sparse_fusion.camera_query import (
    FAR_CLIP_FACTOR,
    FrustumParams,
    lift_mask,
    make_camera_queries,
    project_cloud,
    weighted_centroid,
)
from sparse_fusion.exceptions import ConstraintViolationError
from sparse_fusion.geom3d import project
from sparse_fusion.lidar_query import gt_membership
from sparse_fusion.query import Modality
from sparse_fusion.scene_synth import InstanceMask, Scene
from tests.conftest import Helpers


def _mask(bitmap: np.ndarray, instance_id: int = 1, class_id: int = 0, camera_index: int = 0) -> InstanceMask:
    return InstanceMask.from_bitmap(camera_index, instance_id, class_id, bitmap)


def _full_mask(height: int = 270, width: int = 480, **kwargs: t.Any) -> InstanceMask:
    return _mask(np.ones((height, width), dtype=bool), **kwargs)


@pytest.mark.query
class TestFrustumParams:
    def test_for_range(self) -> None:
        params = FrustumParams.for_range(50.0)
        assert params.depth_max_m == pytest.approx(FAR_CLIP_FACTOR * 50.0)
        assert params.depth_min_m == 0.5

    @pytest.mark.parametrize(
        "kwargs",
        [
            pytest.param({"depth_min_m": 0.0}, id="zero near plane"),
            pytest.param({"depth_min_m": 10.0, "depth_max_m": 5.0}, id="far before near"),
            pytest.param({"score_floor": 0.0}, id="zero floor"),
        ],
    )
    def test_invalid(self, kwargs: t.Dict[str, t.Any]) -> None:
        with pytest.raises(ConstraintViolationError):
            FrustumParams(**kwargs)


@pytest.mark.query
class TestLiftMask:
    def test_single_pixel_single_point(self, helpers: t.Type[Helpers]) -> None:
        camera = helpers.front_camera()
        bitmap = np.zeros((270, 480), dtype=bool)
        bitmap[135, 240] = True
        points = np.array([[10.0, 0.0, 1.8]])
        selected = lift_mask(_mask(bitmap), camera, points, FrustumParams())
        assert selected is not None
        assert selected.tolist() == [0]

    def test_beyond_the_far_plane(self, helpers: t.Type[Helpers]) -> None:
        points = np.array([[100.0, 0.0, 1.8]])
        params = FrustumParams(depth_min_m=0.5, depth_max_m=50.0)
        assert lift_mask(_full_mask(), helpers.front_camera(), points, params) is None

    def test_before_the_near_plane(self, helpers: t.Type[Helpers]) -> None:
        points = np.array([[0.2, 0.0, 1.8], [5.0, 0.0, 1.8]])
        selected = lift_mask(_full_mask(), helpers.front_camera(), points, FrustumParams())
        assert selected is not None
        assert selected.tolist() == [1]

    def test_mask_shape_must_match_the_camera(self, helpers: t.Type[Helpers]) -> None:
        with pytest.raises(ConstraintViolationError):
            lift_mask(_full_mask(10, 10), helpers.front_camera(), np.zeros((1, 3)), FrustumParams())

    def test_off_image_points_are_ignored(self, helpers: t.Type[Helpers]) -> None:
        points = np.array([[10.0, 50.0, 1.8], [-10.0, 0.0, 1.8], [10.0, 0.0, 1.8]])
        cloud = project_cloud(points, helpers.front_camera())
        assert cloud.pixel.tolist()[:2] == [-1, -1]
        assert cloud.pixel[2] == 135 * 480 + 240

    def test_oracle_masks_bound_the_selection(self, small_scene: Scene) -> None:
        params = FrustumParams.for_range(small_scene.range_m)
        lifted = 0
        for camera_index, camera in enumerate(small_scene.cameras):
            for mask in small_scene.masks[camera_index]:
                selected = lift_mask(mask, camera, small_scene.points, params)
                chosen = set() if selected is None else set(selected.tolist())
                for index, point in enumerate(small_scene.points):
                    projected = project(point, camera)
                    if projected is None or not params.depth_min_m <= projected[2] <= params.depth_max_m:
                        assert index not in chosen
                        continue
                    col, row = int(np.floor(projected[0] + 0.5)), int(np.floor(projected[1] + 0.5))
                    in_image = 0 <= col < camera.image_w and 0 <= row < camera.image_h
                    on_mask = in_image and bool(mask.bitmap[row, col])
                    assert (index in chosen) == on_mask
                    if in_image and small_scene.point_instance[index] == mask.instance_id:
                        assert index in chosen
                lifted += len(chosen)
        assert lifted > 0


@pytest.mark.query
class TestMakeCameraQueries:
    def test_equal_scores_give_the_plain_centroid(self, rng: np.random.Generator) -> None:
        points = rng.uniform(-3, 3, size=(50, 3))
        assert weighted_centroid(points, np.full(50, 0.7), 1e-3) == pytest.approx(tuple(points.mean(axis=0)))

    def test_overlapping_masks_copy_shared_points(self, helpers: t.Type[Helpers]) -> None:
        camera = helpers.front_camera()
        left = np.zeros((270, 480), dtype=bool)
        left[100:170, 200:245] = True
        right = np.zeros((270, 480), dtype=bool)
        right[100:170, 235:280] = True
        points = np.array([[10.0, 0.0, 1.8], [10.0, 0.5, 1.8], [10.0, -0.5, 1.8]])
        queries = make_camera_queries(
            ((_mask(left, instance_id=1), _mask(right, instance_id=2)),),
            (camera,),
            points,
            np.ones(3),
            FrustumParams(),
        )
        assert [q.point_indices.tolist() for q in queries] == [[0, 1], [0, 2]]
        assert all(q.modality is Modality.CAMERA for q in queries)
        assert [q.source_box2.box for q in queries] == [_mask(left).bbox2, _mask(right).bbox2]

    def test_background_clutter_barely_moves_the_position(self, helpers: t.Type[Helpers]) -> None:
        near = np.column_stack([np.full(20, 10.0), np.linspace(-0.3, 0.3, 20), np.linspace(0.5, 1.5, 20)])
        clutter = np.column_stack([np.full(30, 40.0), np.linspace(-2.0, 2.0, 30), np.full(30, 0.1)])
        points = np.vstack([near, clutter])
        scores = np.concatenate([np.ones(20), np.zeros(30)])
        params = FrustumParams(depth_min_m=0.5, depth_max_m=60.0, score_floor=1e-3)
        (query,) = make_camera_queries(((_full_mask(),),), (helpers.front_camera(),), points, scores, params)
        weights = np.maximum(params.score_floor, scores)
        expected = (weights[:, None] * points).sum(axis=0) / weights.sum()
        assert np.allclose(query.position, expected, rtol=0.0, atol=1e-9)
        depth_span = params.depth_max_m - params.depth_min_m
        assert np.linalg.norm(np.array(query.position) - near.mean(axis=0)) <= 3 * params.score_floor * depth_span

    def test_empty_frustum_gives_no_query(self, helpers: t.Type[Helpers]) -> None:
        bitmap = np.zeros((270, 480), dtype=bool)
        bitmap[0:5, 0:5] = True
        points = np.array([[10.0, 0.0, 1.8]])
        masks = ((_mask(bitmap),),)
        assert make_camera_queries(masks, (helpers.front_camera(),), points, np.ones(1), FrustumParams()) == []

    def test_one_query_per_lifted_mask(self, small_scene: Scene) -> None:
        params = FrustumParams.for_range(small_scene.range_m)
        scores = gt_membership(small_scene).astype(float)
        queries = make_camera_queries(small_scene.masks, small_scene.cameras, small_scene.points, scores, params)
        expected_order = [
            (c, m.class_id)
            for c, per_camera in enumerate(small_scene.masks)
            for m in per_camera
            if lift_mask(m, small_scene.cameras[c], small_scene.points, params) is not None
        ]
        assert len(queries) > 0
        assert [(q.source_box2.camera_index, q.class_hint) for q in queries] == expected_order

    def test_scores_must_match_points(self, small_scene: Scene) -> None:
        with pytest.raises(ConstraintViolationError):
            make_camera_queries(small_scene.masks, small_scene.cameras, small_scene.points, np.ones(3), FrustumParams())
