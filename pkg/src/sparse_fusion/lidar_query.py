"""LiDAR queries: voxel indexing, foreground scoring, center voting and connected components of the votes."""

import itertools
import logging
import typing as t
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import typing_extensions as tx
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .exceptions import ConstraintViolationError
from .geom3d import Vec3, points_in_box3
from .query import Modality, Query
from .scene_synth import BACKGROUND, RngStream, Scene, stream_rng


logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

NEIGHBOUR_OFFSETS: t.Tuple[t.Tuple[int, int, int], ...] = tuple(itertools.product((-1, 0, 1), repeat=3))
_MAX_PENDING_EDGES: int = 2_000_000
_BLOCK_ROWS: int = 512


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Sparse voxel index: ``coords[k]`` is an occupied cell and ``point_voxel[i]`` the cell of point ``i``."""

    voxel_size: Vec3
    origin: Vec3
    coords: IntArray
    point_voxel: IntArray

    @property
    def n_cells(self) -> int:
        return int(self.coords.shape[0])

    def cells(self) -> t.Dict[t.Tuple[int, int, int], IntArray]:
        """Voxel coordinate to the sorted indices of the points it holds."""
        order = np.argsort(self.point_voxel, kind="stable")
        splits = np.flatnonzero(np.diff(self.point_voxel[order])) + 1
        return {
            (int(c[0]), int(c[1]), int(c[2])): members
            for c, members in zip(self.coords[np.unique(self.point_voxel)], np.split(order, splits))
        }


def voxelize(
    points: npt.ArrayLike,
    voxel_size: t.Sequence[float] = (0.2, 0.2, 0.2),
    origin: t.Sequence[float] = (0.0, 0.0, 0.0),
) -> VoxelGrid:
    size = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    if not (np.isfinite(size).all() and (size > 0).all()):
        raise ConstraintViolationError(f"voxel_size components must be positive, got {tuple(voxel_size)!r}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    shifted = pts - np.asarray(origin, dtype=np.float64).reshape(3)
    coords = np.floor(shifted / size).astype(np.int64)
    if coords.shape[0] == 0:
        cells, inverse = np.empty((0, 3), dtype=np.int64), np.empty(0, dtype=np.int64)
    else:
        cells, inverse = np.unique(coords, axis=0, return_inverse=True)
    return VoxelGrid(
        voxel_size=(float(size[0]), float(size[1]), float(size[2])),
        origin=tuple(float(o) for o in origin),  # type: ignore[arg-type]
        coords=cells,
        point_voxel=np.asarray(inverse, dtype=np.int64).reshape(-1),
    )


class Vote(t.NamedTuple):
    point_index: int
    voted_center: Vec3


@dataclass(frozen=True, eq=False)
class Votes:
    """Column-wise votes: ``centers[k]`` is voted by point ``point_indices[k]`` located at ``points[k]``."""

    point_indices: IntArray
    centers: FloatArray
    points: FloatArray

    @classmethod
    def empty(cls) -> "Votes":
        return cls(np.empty(0, dtype=np.int64), np.empty((0, 3)), np.empty((0, 3)))

    def __len__(self) -> int:
        return int(self.point_indices.shape[0])

    def __iter__(self) -> t.Iterator[Vote]:
        for index, center in zip(self.point_indices, self.centers):
            yield Vote(int(index), (float(center[0]), float(center[1]), float(center[2])))

    def take(self, selection: npt.ArrayLike) -> "Votes":
        return Votes(self.point_indices[selection], self.centers[selection], self.points[selection])

    def center_table(self, n_points: int) -> FloatArray:
        """``(n_points, 3)`` voted centers indexed by point, NaN for points that did not vote."""
        table = np.full((n_points, 3), np.nan, dtype=np.float64)
        table[self.point_indices] = self.centers
        return table


class Cluster(t.NamedTuple):
    point_indices: IntArray
    position: Vec3

    @property
    def modality(self) -> Modality:
        return Modality.LIDAR


class Scorer(tx.Protocol):
    def __call__(self, scene: Scene, seed: int) -> FloatArray:
        ...


class Voter(tx.Protocol):
    def __call__(self, scene: Scene, scores: FloatArray, seed: int) -> Votes:
        ...


def gt_membership(scene: Scene) -> npt.NDArray[np.bool_]:
    """Whether each point lies inside any ground truth box."""
    inside = np.zeros(scene.points.shape[0], dtype=bool)
    for g in scene.gt:
        inside |= points_in_box3(scene.points, g.box)
    return inside


def oracle_score(scene: Scene, flip_prob: float, seed: int) -> FloatArray:
    """Exact box membership with every score independently flipped with ``flip_prob``."""
    if not 0.0 <= flip_prob <= 1.0:
        raise ConstraintViolationError(f"flip_prob must be in [0, 1], got {flip_prob!r}")
    membership = gt_membership(scene)
    flips = stream_rng(seed, RngStream.SCORE_FLIP, 0).random(membership.shape[0]) < flip_prob
    return (membership ^ flips).astype(np.float64)


def oracle_vote(
    scene: Scene,
    points: npt.ArrayLike,
    scores: npt.ArrayLike,
    fg_threshold: float = 0.5,
    sigma_m: float = 0.0,
    seed: int = 0,
) -> Votes:
    """Votes of the points scoring at least ``fg_threshold``.

    A true foreground point votes for its object's center, any other retained point for its own position;
    isotropic Gaussian noise of std ``sigma_m`` is added to every vote.
    """
    if sigma_m < 0:
        raise ConstraintViolationError(f"vote_sigma_m must be >= 0, got {sigma_m!r}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    score = np.asarray(scores, dtype=np.float64).reshape(-1)
    if score.shape[0] != pts.shape[0]:
        raise ConstraintViolationError("scores must have one entry per point")
    retained = np.flatnonzero(score >= fg_threshold)
    if retained.size == 0:
        return Votes.empty()

    centers = pts[retained].copy()
    instances = scene.point_instance[retained]
    for g in scene.gt:
        centers[instances == g.instance_id] = g.box.center_array
    if sigma_m > 0:
        centers += stream_rng(seed, RngStream.VOTE_NOISE, 0).normal(0.0, sigma_m, size=centers.shape)
    logger.debug(
        "%d votes, %d from background points", retained.size, int(np.count_nonzero(instances == BACKGROUND))
    )
    return Votes(retained.astype(np.int64), centers, pts[retained])


@dataclass(frozen=True)
class OracleScorer:
    flip_prob: float = 0.0

    def __call__(self, scene: Scene, seed: int) -> FloatArray:
        return oracle_score(scene, self.flip_prob, seed)


@dataclass(frozen=True)
class OracleVoter:
    fg_threshold: float = 0.5
    sigma_m: float = 0.0

    def __call__(self, scene: Scene, scores: FloatArray, seed: int) -> Votes:
        return oracle_vote(scene, scene.points, scores, self.fg_threshold, self.sigma_m, seed)


def _compact_edges(rows: IntArray, cols: IntArray, n_nodes: int) -> t.Tuple[IntArray, IntArray]:
    """Replace an edge list by a star per component; connectivity is unchanged."""
    graph = coo_matrix((np.ones(rows.shape[0], dtype=np.int8), (rows, cols)), shape=(n_nodes, n_nodes))
    _, labels = connected_components(graph, directed=False)
    nodes = np.unique(np.concatenate([rows, cols]))
    _, root_of_label = np.unique(labels, return_index=True)
    return nodes, root_of_label[labels[nodes]]


def connected_labels(centers: FloatArray, radius: float) -> IntArray:
    """Connected component label of every center under the ``distance <= radius`` graph."""
    n = centers.shape[0]
    cells = np.floor(centers / radius).astype(np.int64)
    order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
    splits = np.flatnonzero(np.any(np.diff(cells[order], axis=0) != 0, axis=1)) + 1
    table: t.Dict[t.Tuple[int, int, int], IntArray] = {}
    for members in np.split(order, splits):
        c = cells[members[0]]
        table[(int(c[0]), int(c[1]), int(c[2]))] = members

    limit = radius * radius
    rows: t.List[IntArray] = []
    cols: t.List[IntArray] = []
    pending = 0
    for key, members in table.items():
        for offset in NEIGHBOUR_OFFSETS:
            other_key = (key[0] + offset[0], key[1] + offset[1], key[2] + offset[2])
            if other_key < key:
                continue
            others = table.get(other_key)
            if others is None:
                continue
            for start in range(0, members.shape[0], _BLOCK_ROWS):
                block = members[start : start + _BLOCK_ROWS]
                dist2 = ((centers[block][:, None, :] - centers[others][None, :, :]) ** 2).sum(axis=-1)
                i, j = np.nonzero(dist2 <= limit)
                rows.append(block[i])
                cols.append(others[j])
                pending += i.shape[0]
                if pending > _MAX_PENDING_EDGES:
                    compact_rows, compact_cols = _compact_edges(np.concatenate(rows), np.concatenate(cols), n)
                    rows, cols, pending = [compact_rows], [compact_cols], compact_rows.shape[0]

    all_rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    all_cols = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    graph = coo_matrix((np.ones(all_rows.shape[0], dtype=np.int8), (all_rows, all_cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return np.asarray(labels, dtype=np.int64)


def ccl_cluster(votes: Votes, connect_radius_m: float = 0.5, min_cluster_points: int = 2) -> t.List[Cluster]:
    """Cluster votes whose voted centers are connected by hops of at most ``connect_radius_m``.

    Candidate neighbours come from a spatial hash with cells of ``connect_radius_m``: only the 27 cells around
    a vote's cell are searched. Components smaller than ``min_cluster_points`` are discarded; the survivors
    are ordered by their smallest point index.
    """
    if not connect_radius_m > 0:
        raise ConstraintViolationError(f"connect_radius_m must be positive, got {connect_radius_m!r}")
    if min_cluster_points < 1:
        raise ConstraintViolationError(f"min_cluster_points must be >= 1, got {min_cluster_points!r}")
    if len(votes) == 0:
        return []

    unique_centers, node_of_vote = np.unique(votes.centers, axis=0, return_inverse=True)
    node_labels = connected_labels(unique_centers, connect_radius_m)
    vote_labels = node_labels[np.asarray(node_of_vote).reshape(-1)]

    clusters: t.List[Cluster] = []
    order = np.argsort(vote_labels, kind="stable")
    splits = np.flatnonzero(np.diff(vote_labels[order])) + 1
    for members in np.split(order, splits):
        indices, first = np.unique(votes.point_indices[members], return_index=True)
        if indices.shape[0] < min_cluster_points:
            continue
        centroid = votes.points[members][first].mean(axis=0)
        clusters.append(Cluster(indices, (float(centroid[0]), float(centroid[1]), float(centroid[2]))))
    clusters.sort(key=lambda c: int(c.point_indices[0]))
    logger.debug("%d votes formed %d clusters", len(votes), len(clusters))
    return clusters


def make_lidar_queries(clusters: t.Iterable[Cluster], points: npt.ArrayLike) -> t.List[Query]:
    """One LiDAR query per cluster, positioned at the centroid of its member points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    queries: t.List[Query] = []
    for cluster in clusters:
        centroid = pts[cluster.point_indices].mean(axis=0)
        queries.append(
            Query(
                point_indices=cluster.point_indices,
                modality=Modality.LIDAR,
                position=(float(centroid[0]), float(centroid[1]), float(centroid[2])),
            )
        )
    return queries
