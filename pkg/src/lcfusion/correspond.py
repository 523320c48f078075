"""LiDAR observation extraction: normals, key points and point-to-plane matches."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import CountExceedsCloud, MissingNormals
from .geometry import Pose, relative_cloud_transform, transform_point
from .graph import LidarObservations, adjacency_pairs
from .io import read_ply, write_ply

logger = logging.getLogger(__name__)

# smallest/middle eigenvalue ratio below which a neighbourhood counts as collinear
_RANK_TOL = 1e-10


@dataclass(eq=False)
class PointCloud:
    """Points in the LiDAR frame of their station, with optional normals/curvatures.

    A zero normal marks a point whose neighbourhood was degenerate.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    curvatures: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals and points differ in length")
        if self.curvatures is not None:
            self.curvatures = np.asarray(self.curvatures, dtype=float).reshape(-1)

    def __len__(self):
        return len(self.points)

    @property
    def has_normals(self):
        return self.normals is not None

    @property
    def valid(self):
        """Points with a usable normal."""
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) < 1e-6

    @cached_property
    def index(self):
        return SpatialIndex(self.points)

    def transformed(self, T: Pose):
        normals = None if self.normals is None else self.normals @ T.R.T
        return PointCloud(transform_point(self.points, T), normals, self.curvatures)

    def save(self, path, binary=True):
        write_ply(path, self.points, self.normals, self.curvatures, binary=binary)

    @classmethod
    def load(cls, path):
        return cls(*read_ply(path))


class SpatialIndex:
    """Exact nearest-neighbour queries (k-d tree)."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, p, k=1, max_dist=np.inf):
        """Distances and indices; misses beyond ``max_dist`` get ``inf`` / ``len(self)``."""
        return self._tree.query(np.asarray(p, dtype=float), k=k, distance_upper_bound=max_dist)


def estimate_normals(cloud: PointCloud, k=20) -> PointCloud:
    """PCA normals and surface variation from the ``k`` nearest neighbours of each point.

    The normal is the eigenvector of the smallest covariance eigenvalue and is
    flipped to face the sensor origin. Curvature is ``l0 / (l0 + l1 + l2)``.
    Collinear neighbourhoods get a zero normal (invalid) and curvature ``inf``.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(cloud) < k + 1:
        raise ValueError(f"need at least {k + 1} points, got {len(cloud)}")
    pts = cloud.points
    _, idx = cloud.index.query(pts, k=k + 1)
    nbrs = pts[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    normals = evecs[:, :, 0].copy()
    flip = np.einsum("ij,ij->i", normals, -pts) < 0
    normals[flip] *= -1
    total = evals.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        curv = np.where(total > 0, evals[:, 0] / total, np.inf)
    degenerate = evals[:, 1] <= _RANK_TOL * np.maximum(evals[:, 2], 1e-300)
    if degenerate.any():
        logger.debug("%d points with collinear neighbourhoods marked invalid", int(degenerate.sum()))
    normals[degenerate] = 0.0
    curv[degenerate] = np.inf
    return PointCloud(pts, normals, curv)


def sample_keypoints(cloud: PointCloud, count, seed):
    n = len(cloud)
    if count > n:
        raise CountExceedsCloud(f"asked for {count} key points from a cloud of {n}")
    return np.random.default_rng(seed).choice(n, size=count, replace=False)


def default_keypoints(clouds, count, seed):
    """Key points for every cloud; cloud ``j`` uses the seed sequence ``(seed, j)``."""
    return [sample_keypoints(c, min(count, len(c)), np.random.SeedSequence([seed, j]))
            for j, c in enumerate(clouds)]


def usable_normals(cloud: PointCloud, max_curvature=None):
    mask = cloud.valid
    if max_curvature is not None and cloud.curvatures is not None:
        mask &= cloud.curvatures <= max_curvature
    return mask


def extract_pair(target: PointCloud, source: PointCloud, M: Pose, keypoints, i, j,
                 max_dist=0.1, max_curvature=None):
    """Point-to-plane matches for one ``(target i, source j)`` pair under transform ``M``."""
    if not target.has_normals:
        raise MissingNormals(f"target cloud {i} has no normals")
    p = source.points[keypoints]
    moved = transform_point(p, M)
    dist, idx = target.index.query(moved, max_dist=max_dist)
    hit = np.isfinite(dist)
    ok = np.zeros(len(p), dtype=bool)
    ok[hit] = usable_normals(target, max_curvature)[idx[hit]]
    ok[hit] &= dist[hit] <= max_dist
    m = int(ok.sum())
    if m == 0:
        logger.info("cloud pair (%d, %d) produced no LiDAR observations", i, j)
    return LidarObservations(np.full(m, i), np.full(m, j), p[ok], target.points[idx[ok]],
                             target.normals[idx[ok]])


def extract_lidar_observations(clouds, Al, poses, Te: Pose, max_dist=0.1, keypoints_per_cloud=2000,
                               seed=0, keypoints=None, max_curvature=None):
    """Build the LiDAR observation set for every connected cloud pair ``i < j``.

    Source key points are stored in their own frame; ``q`` and ``n`` come from the
    target cloud. Pass ``keypoints`` to reuse a fixed sample across rounds.
    """
    for c_id, c in enumerate(clouds):
        if not c.has_normals:
            raise MissingNormals(f"cloud {c_id} has no normals")
    if keypoints is None:
        keypoints = default_keypoints(clouds, keypoints_per_cloud, seed)
    parts = []
    for i, j in adjacency_pairs(Al):
        M = relative_cloud_transform(poses[i], poses[j], Te)
        parts.append(extract_pair(clouds[i], clouds[j], M, keypoints[j], i, j, max_dist, max_curvature))
    return LidarObservations.concatenate(parts)
