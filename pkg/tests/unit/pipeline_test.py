import logging
import math
import typing as t
from pathlib import Path

import numpy as np
import pytest
from pytest_mock import MockerFixture

from sparse_fusion import SparseFusion
from sparse_fusion.assign_loss import NEGATIVE
from sparse_fusion.config import PipelineConfig
from sparse_fusion.eval_bench import evaluate
from sparse_fusion.lidar_query import gt_membership
from sparse_fusion.pipeline import STAGES
from sparse_fusion.query import Modality
from sparse_fusion.scene_synth import Scene


def _detector(**kwargs: t.Any) -> SparseFusion:
    return SparseFusion(config=PipelineConfig(**kwargs), quiet=True)


@pytest.mark.pipeline
class TestDetect:
    def test_stage_counts(self, small_scene: Scene) -> None:
        result = _detector().detect(small_scene)
        assert tuple(result.stage_counts) == STAGES
        assert result.stage_counts["points"] == small_scene.points.shape[0]
        assert result.stage_counts["lidar_queries"] == len(result.lidar_queries)
        assert result.stage_counts["camera_queries"] == len(result.camera_queries)
        assert result.stage_counts["detections_raw"] == len(result.raw_detections)
        assert result.stage_counts["detections"] == len(result.detections)

    def test_per_query_outputs_run_parallel(self, small_scene: Scene) -> None:
        result = _detector().detect(small_scene)
        n_queries = len(result.queries)
        assert n_queries > 0
        assert len(result.reference_boxes) == len(result.aligned_queries) == len(result.raw_detections) == n_queries
        for query, aligned, raw in zip(result.queries, result.aligned_queries, result.raw_detections):
            assert aligned.modality is query.modality
            assert raw.provenance is query.modality

    def test_oracle_detector_finds_the_objects(self, small_scene: Scene) -> None:
        result = _detector().detect(small_scene)
        report = evaluate([list(result.detections)], [list(small_scene.gt)], (2.0,))
        assert report.recall[2.0] >= 0.75

    def test_runs_are_deterministic(self, small_scene: Scene) -> None:
        first = _detector(flip_prob=0.05, vote_sigma_m=0.1, seed=3).detect(small_scene)
        second = _detector(flip_prob=0.05, vote_sigma_m=0.1, seed=3).detect(small_scene)
        assert first.detections == second.detections
        assert first.stage_counts == second.stage_counts

    def test_the_seed_changes_the_noise(self, small_scene: Scene) -> None:
        first = _detector(flip_prob=0.2, seed=1).detect(small_scene)
        second = _detector(flip_prob=0.2, seed=2).detect(small_scene)
        assert not np.array_equal(first.scores, second.scores)

    def test_empty_scene(self, empty_scene: Scene) -> None:
        result = _detector().detect(empty_scene)
        assert result.detections == ()
        assert result.queries == ()
        assert result.stage_counts["points"] == empty_scene.points.shape[0]

    @pytest.mark.parametrize(
        "kwargs, missing",
        [
            pytest.param({"use_lidar_queries": False}, Modality.LIDAR, id="camera only"),
            pytest.param({"use_camera_queries": False}, Modality.CAMERA, id="lidar only"),
        ],
    )
    def test_single_path(self, small_scene: Scene, kwargs: t.Dict[str, t.Any], missing: Modality) -> None:
        result = _detector(**kwargs).detect(small_scene)
        assert result.queries
        assert all(q.modality is not missing for q in result.queries)
        assert all(d.provenance is not missing for d in result.detections)

    def test_without_alignment(self, small_scene: Scene) -> None:
        result = _detector(align_queries=False).detect(small_scene)
        assert all(a is q for a, q in zip(result.aligned_queries, result.queries))
        assert len(result.reference_boxes) == len(result.queries)

    def test_detections_are_deduplicated(self, small_scene: Scene) -> None:
        result = _detector(dedup_dist_m=1.0).detect(small_scene)
        kept = result.detections
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                if a.class_id == b.class_id:
                    assert math.hypot(a.box.center[0] - b.box.center[0], a.box.center[1] - b.box.center[1]) >= 1.0

    def test_live_elements(self, small_scene: Scene) -> None:
        result = _detector().detect(small_scene)
        assert result.live_elements >= small_scene.points.shape[0] + result.voxels.n_cells

    def test_custom_scorer(self, small_scene: Scene, mocker: MockerFixture) -> None:
        scorer = mocker.Mock(side_effect=lambda scene, seed: gt_membership(scene).astype(float))
        detector = SparseFusion(scorer=scorer, quiet=True)
        detector.detect(small_scene)
        scorer.assert_called_once()
        assert scorer.call_args.args[0] is small_scene


@pytest.mark.pipeline
class TestAssignAndLosses:
    @pytest.mark.parametrize("assignment", ["two_round", "query_in_box"])
    def test_assignments_cover_every_query(self, small_scene: Scene, assignment: str) -> None:
        detector = _detector(assignment=assignment)
        result = detector.detect(small_scene)
        generation, refinement = detector.assign(small_scene, result)
        assert len(generation) == len(refinement) == len(result.queries)
        assert generation.positives
        assert all(g == NEGATIVE or 0 <= g < len(small_scene.gt) for g in generation.gt_index)

    def test_no_ground_truth_means_no_positives(self, empty_scene: Scene) -> None:
        detector = _detector()
        generation, refinement = detector.assign(empty_scene, detector.detect(empty_scene))
        assert generation.positives == []
        assert refinement.positives == []

    def test_losses_are_finite(self, small_scene: Scene) -> None:
        detector = _detector(flip_prob=0.05)
        losses = detector.losses(small_scene, detector.detect(small_scene))
        parts = losses.as_dict()
        assert set(parts) == {"seg", "vote", "cls_li", "reg_li", "cls_cam", "reg_cam", "cls_ref", "reg_ref", "total"}
        assert all(math.isfinite(v) and v >= 0.0 for v in parts.values())
        assert parts["total"] == pytest.approx(sum(v for k, v in parts.items() if k != "total"))
        assert parts["seg"] > 0.0

    def test_losses_of_an_empty_scene(self, empty_scene: Scene) -> None:
        detector = _detector()
        losses = detector.losses(empty_scene, detector.detect(empty_scene))
        assert losses.vote == 0.0
        assert losses.reg_li == losses.reg_cam == losses.reg_ref == 0.0


@pytest.mark.pipeline
class TestLogging:
    def test_quiet_has_no_screen_handler(self) -> None:
        assert not any(isinstance(h, logging.StreamHandler) for h in _detector().logger.handlers)

    def test_log_file(self, small_scene: Scene, tmp_path: Path) -> None:
        log_file = tmp_path / "detect.log"
        detector = SparseFusion(log_file=log_file, quiet=True)
        detector.detect(small_scene)
        for handler in detector.logger.handlers:
            handler.flush()
        assert "lidar queries" in log_file.read_text(encoding="utf-8")

    def test_handlers_are_not_duplicated(self) -> None:
        SparseFusion(quiet=False)
        detector = SparseFusion(quiet=False)
        assert len(detector.logger.handlers) == 1

    def test_empty_frustum_warning(self, small_scene: Scene, caplog: pytest.LogCaptureFixture) -> None:
        detector = _detector(depth_max_m=0.6)
        with caplog.at_level(logging.WARNING, logger=detector.logger.name):
            result = detector.detect(small_scene)
        assert result.camera_queries == ()
        assert "lifted an empty frustum" in caplog.text
