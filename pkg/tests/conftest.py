import math
import os
import typing as t
from contextlib import contextmanager
from pathlib import Path

import factory
import factory.random
import numpy as np
import pytest
from _pytest.config import Config
from _pytest.config.argparsing import Parser
from click.testing import CliRunner

from sparse_fusion.config import SEED_ENV, PipelineConfig
from sparse_fusion.geom3d import CameraModel
from sparse_fusion.scene_synth import Scene, SceneConfig, generate_scene


def pytest_addoption(parser: "Parser"):
    parser.addoption(
        "--root-seed",
        dest="root_seed",
        type=int,
        default=0,
        help="Root seed of randomly generated test inputs. Defaults to 0.",
    )


@pytest.fixture(autouse=True)
def deterministic_inputs(pytestconfig: Config, monkeypatch: pytest.MonkeyPatch) -> None:
    factory.random.reseed_random(pytestconfig.getoption("root_seed"))
    monkeypatch.delenv(SEED_ENV, raising=False)


class Helpers:
    @staticmethod
    @contextmanager
    def not_raises(exception: t.Type[Exception]) -> t.Generator:
        try:
            yield
        except exception:
            raise pytest.fail(f"DID RAISE {exception}")

    @staticmethod
    def front_camera(image_w: int = 480, image_h: int = 270, focal_px: float = 240.0) -> CameraModel:
        """A level camera 1.8 m above the origin looking along world x."""
        return CameraModel.from_pose(
            position=(0.0, 0.0, 1.8), yaw=0.0, fx=focal_px, fy=focal_px, image_w=image_w, image_h=image_h
        )

    @staticmethod
    def bearing_offset(distance: float, bearing: float, lateral: float = 0.0) -> t.Tuple[float, float]:
        """xy of a point ``distance`` along ``bearing`` shifted ``lateral`` to the left of it."""
        return (
            distance * math.cos(bearing) - lateral * math.sin(bearing),
            distance * math.sin(bearing) + lateral * math.cos(bearing),
        )

    @staticmethod
    def file_tree(root: t.Union[str, "os.PathLike[t.Any]"]) -> t.Dict[str, bytes]:
        folder = Path(root)
        return {p.name: p.read_bytes() for p in sorted(folder.iterdir()) if p.is_file()}


@pytest.fixture
def helpers() -> t.Type[Helpers]:
    return Helpers


@pytest.fixture(scope="session")
def small_scene() -> Scene:
    return generate_scene(SceneConfig(range_m=30.0, n_objects=4, background_points=3000, seed=7))


@pytest.fixture(scope="session")
def default_scene() -> Scene:
    return generate_scene(SceneConfig(seed=11, min_center_gap=8.0))


@pytest.fixture(scope="session")
def empty_scene() -> Scene:
    return generate_scene(SceneConfig(n_objects=0, background_points=500, seed=3))


@pytest.fixture
def pipeline_config() -> PipelineConfig:
    return PipelineConfig()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture()
def cli_runner() -> t.Iterator[CliRunner]:
    yield CliRunner()
