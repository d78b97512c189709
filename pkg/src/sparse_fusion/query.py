"""The instance unit shared by both query paths."""

import enum
import typing as t
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .exceptions import ConstraintViolationError
from .geom3d import Box2, Vec3


IntArray = npt.NDArray[np.int64]


class Modality(str, enum.Enum):
    LIDAR = "lidar"
    CAMERA = "camera"


class SourceBox(t.NamedTuple):
    """The 2D evidence a camera query was lifted from."""

    camera_index: int
    box: Box2


@dataclass(frozen=True, eq=False)
class Query:
    """A point cluster tagged with its modality.

    ``point_indices`` index the scene cloud; the same index may appear in several queries.
    """

    point_indices: IntArray
    modality: Modality
    position: Vec3
    source_box2: t.Optional[SourceBox] = None
    class_hint: t.Optional[int] = None

    def __post_init__(self) -> None:
        indices = np.unique(np.asarray(self.point_indices, dtype=np.int64).reshape(-1))
        if indices.size == 0:
            raise ConstraintViolationError("Query.point_indices must not be empty")
        indices.setflags(write=False)
        object.__setattr__(self, "point_indices", indices)
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "position", tuple(float(p) for p in self.position))
        if self.modality is Modality.CAMERA and self.source_box2 is None:
            raise ConstraintViolationError("camera queries must carry source_box2")
        if self.modality is Modality.LIDAR and self.source_box2 is not None:
            raise ConstraintViolationError("lidar queries must not carry source_box2")

    @property
    def size(self) -> int:
        return int(self.point_indices.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Query):
            return NotImplemented
        return (
            self.modality is other.modality
            and self.position == other.position
            and self.source_box2 == other.source_box2
            and self.class_hint == other.class_hint
            and np.array_equal(self.point_indices, other.point_indices)
        )

    __hash__ = None  # type: ignore[assignment]
