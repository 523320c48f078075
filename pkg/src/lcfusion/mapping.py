"""Depth refinement with LiDAR (outlier removal, hole filling) and model assembly.

Depth maps hold z-depth in the camera frame, NaN where invalid. Pixel ``(u, v)``
is column ``u``, row ``v`` and its centre sits at integer coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .correspond import PointCloud
from .errors import DimensionMismatch, MissingNormals
from .geometry import CameraIntrinsics, Pose, inverse, transform_point
from .io import read_depth_map, write_depth_map

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class DepthMap:
    width: int
    height: int
    depth: np.ndarray
    frame: int = 0

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        if self.depth.shape != (self.height, self.width):
            raise DimensionMismatch(f"depth array {self.depth.shape} does not match {self.height}x{self.width}")
        bad = ~(self.depth > 0)
        if bad.any():
            self.depth = np.where(bad, np.nan, self.depth)

    @classmethod
    def empty(cls, width, height, frame=0):
        return cls(width, height, np.full((height, width), np.nan), frame)

    @property
    def valid(self):
        return np.isfinite(self.depth)

    @property
    def shape(self):
        return (self.height, self.width)

    def copy(self):
        return DepthMap(self.width, self.height, self.depth.copy(), self.frame)

    def save(self, path):
        write_depth_map(path, self.depth)

    @classmethod
    def load(cls, path, frame=0):
        d = read_depth_map(path)
        return cls(d.shape[1], d.shape[0], d, frame)


def _image_size(K: CameraIntrinsics, size):
    if size is not None:
        return int(size[0]), int(size[1])
    if not (K.width and K.height):
        raise ValueError("image size unknown: pass size or set intrinsics width/height")
    return int(K.width), int(K.height)


def _camera_from_cloud(Ti: Pose, Te: Pose, cloud_frame):
    """Transform taking cloud coordinates into camera ``i``."""
    if cloud_frame == "lidar":
        return Te
    if cloud_frame == "world":
        return inverse(Ti)
    raise ValueError(f"cloud_frame must be 'lidar' or 'world', got {cloud_frame!r}")


def _project(xc, K: CameraIntrinsics, width, height):
    """Pixel indices of camera-frame points that land in the image with z > 0."""
    z = xc[:, 2]
    front = z > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * xc[:, 0] / z + K.cx
        v = K.fy * xc[:, 1] / z + K.cy
    col = np.floor(u + 0.5)
    row = np.floor(v + 0.5)
    ok = front & (col >= 0) & (col < width) & (row >= 0) & (row < height)
    return ok, np.where(ok, col, 0).astype(np.int64), np.where(ok, row, 0).astype(np.int64), u, v


def project_lidar_depth(cloud: PointCloud, Ti: Pose, Te: Pose, K: CameraIntrinsics, size=None,
                        frame=0, cloud_frame="lidar") -> DepthMap:
    """Sparse LiDAR depth map for camera ``i``; the nearest point wins each pixel.

    ``cloud_frame="lidar"`` means the points are in station ``i``'s LiDAR frame
    (only ``Te`` is used); ``"world"`` means they are in the world frame.
    """
    w, h = _image_size(K, size)
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    xc = transform_point(pts, _camera_from_cloud(Ti, Te, cloud_frame)).reshape(-1, 3)
    ok, col, row, _, _ = _project(xc, K, w, h)
    flat = np.full(w * h, np.inf)
    np.minimum.at(flat, row[ok] * w + col[ok], xc[ok, 2])
    flat[~np.isfinite(flat)] = np.nan
    return DepthMap(w, h, flat.reshape(h, w), frame)


def _pixel_grid(mask):
    rows, cols = np.nonzero(mask)
    return np.column_stack([cols, rows]).astype(float), rows, cols


def remove_outliers(stereo: DepthMap, lidar: DepthMap, max_diff=0.05, radius=3, reference="nearest") -> DepthMap:
    """Fold one: drop stereo depths that disagree with LiDAR.

    A stereo pixel is supported when a valid LiDAR pixel lies within ``radius``
    pixels. With ``reference="nearest"`` it is compared with the nearest such
    LiDAR pixel; with ``"any"`` it survives if any supporting LiDAR depth agrees,
    which tolerates depth slope across slanted surfaces. Disagreement beyond
    ``max_diff`` invalidates the pixel. Unsupported pixels are left alone.
    """
    if stereo.shape != lidar.shape:
        raise DimensionMismatch(f"stereo {stereo.shape} and LiDAR {lidar.shape} depth maps differ in size")
    if reference not in ("nearest", "any"):
        raise ValueError(f"reference must be 'nearest' or 'any', got {reference!r}")
    out = stereo.copy()
    lid_xy, lrows, lcols = _pixel_grid(lidar.valid)
    st_xy, srows, scols = _pixel_grid(stereo.valid)
    if len(lid_xy) == 0 or len(st_xy) == 0:
        return out
    k = 1 if reference == "nearest" else min(len(lid_xy), (2 * int(np.floor(radius)) + 1) ** 2)
    dist, idx = cKDTree(lid_xy).query(st_xy, k=k, distance_upper_bound=radius + 1e-9)
    dist, idx = dist.reshape(len(st_xy), -1), idx.reshape(len(st_xy), -1)
    hit = np.isfinite(dist)
    lid_depth = np.append(lidar.depth[lrows, lcols], np.nan)
    ref = lid_depth[np.where(hit, idx, len(lid_xy))]
    sup = hit.any(axis=1)
    diff = np.where(hit, np.abs(ref - stereo.depth[srows, scols][:, None]), np.inf).min(axis=1)
    bad = sup & (diff > max_diff)
    out.depth[srows[bad], scols[bad]] = np.nan
    logger.debug("fold one removed %d of %d supported stereo depths", int(bad.sum()), int(sup.sum()))
    return out


def lidar_support(stereo: DepthMap, lidar: DepthMap, radius=3):
    """Pixels that have a valid LiDAR depth within ``radius`` pixels."""
    lid_xy, _, _ = _pixel_grid(lidar.valid)
    if len(lid_xy) == 0:
        return np.zeros(stereo.shape, dtype=bool)
    rows, cols = np.indices(stereo.shape)
    xy = np.column_stack([cols.ravel(), rows.ravel()]).astype(float)
    dist, _ = cKDTree(lid_xy).query(xy, distance_upper_bound=radius + 1e-9)
    return np.isfinite(dist).reshape(stereo.shape)


def fill_holes(stereo: DepthMap, cloud: PointCloud, Ti: Pose, Te: Pose, K: CameraIntrinsics,
               max_curvature=0.01, max_view_angle=np.radians(70.0), radius=3, cloud_frame="lidar") -> DepthMap:
    """Fold two: fill invalid stereo pixels from locally flat, well observed LiDAR surfaces.

    Every LiDAR point projecting within ``radius`` pixels of a hole must have a
    valid normal, curvature at most ``max_curvature`` and a normal within
    ``max_view_angle`` of the viewing ray; the hole then takes the depth where
    the pixel ray meets the tangent plane of the nearest such point. Valid
    stereo pixels are never changed.
    """
    if cloud.normals is None or cloud.curvatures is None:
        raise MissingNormals("hole filling needs a cloud with normals and curvatures")
    out = stereo.copy()
    holes = ~stereo.valid
    if not holes.any() or len(cloud) == 0:
        return out
    T = _camera_from_cloud(Ti, Te, cloud_frame)
    xc = transform_point(cloud.points, T).reshape(-1, 3)
    nc = cloud.normals @ T.R.T
    ok, _, _, u, v = _project(xc, K, stereo.width, stereo.height)
    # points a little outside the image still support border pixels
    near = (xc[:, 2] > 1e-9) & (u > -radius - 1) & (u < stereo.width + radius) & (v > -radius - 1) & (
        v < stereo.height + radius)
    idx = np.nonzero(near)[0]
    if len(idx) == 0:
        return out
    p, n, curv = xc[idx], nc[idx], cloud.curvatures[idx]
    ray = p / np.linalg.norm(p, axis=1, keepdims=True)
    unit = np.abs(np.linalg.norm(n, axis=1) - 1.0) < 1e-6
    cos_view = np.abs(np.einsum("ij,ij->i", n, ray))
    good = unit & (curv <= max_curvature) & (cos_view >= np.cos(max_view_angle))

    tree = cKDTree(np.column_stack([u[idx], v[idx]]))
    hole_xy, hrows, hcols = _pixel_grid(holes)
    neighbours = tree.query_ball_point(hole_xy, r=radius + 1e-9)
    dist, nearest = tree.query(hole_xy, distance_upper_bound=radius + 1e-9)
    filled = 0
    for k, nb in enumerate(neighbours):
        j = nearest[k]
        if not nb or not good[j]:
            continue
        # ray through the pixel centre: (x, y, 1) * z
        d = np.array([(hole_xy[k, 0] - K.cx) / K.fx, (hole_xy[k, 1] - K.cy) / K.fy, 1.0])
        denom = n[j] @ d
        if abs(denom) < 1e-12:
            continue
        z = (n[j] @ p[j]) / denom
        if z > 0:
            out.depth[hrows[k], hcols[k]] = z
            filled += 1
    logger.debug("fold two filled %d of %d holes", filled, len(hole_xy))
    return out


def refine(stereo: DepthMap, cloud: PointCloud, Ti: Pose, Te: Pose, K: CameraIntrinsics, max_diff=0.05,
           radius=3, max_curvature=0.01, max_view_angle=np.radians(70.0), fill_radius=None, reference="nearest"):
    """Both folds in their fixed order: remove, then fill."""
    lidar = project_lidar_depth(cloud, Ti, Te, K, (stereo.width, stereo.height), stereo.frame)
    cleaned = remove_outliers(stereo, lidar, max_diff, radius, reference)
    return fill_holes(cleaned, cloud, Ti, Te, K, max_curvature, max_view_angle,
                      radius if fill_radius is None else fill_radius)


def back_project_depth(dm: DepthMap, K: CameraIntrinsics):
    """Camera-frame points of every valid pixel, row-major order."""
    rows, cols = np.nonzero(dm.valid)
    z = dm.depth[rows, cols]
    return np.column_stack([(cols - K.cx) / K.fx * z, (rows - K.cy) / K.fy * z, z])


def voxel_downsample(points, leaf):
    """Centroid of the points in each occupied voxel (voxels in lexicographic order)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points
    keys = np.floor(points / leaf).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inv, points)
    return sums / counts[:, None]


def assemble_model(depth_maps, poses, K: CameraIntrinsics, voxel_leaf=None) -> PointCloud:
    """Back-project every valid depth into the world frame and concatenate.

    ``poses[k]`` is the camera-to-world pose of ``depth_maps[k]``. With
    ``voxel_leaf`` set the result is voxel-averaged.
    """
    parts = [transform_point(back_project_depth(dm, K), P).reshape(-1, 3) for dm, P in zip(depth_maps, poses)]
    pts = np.concatenate(parts) if parts else np.zeros((0, 3))
    if voxel_leaf:
        pts = voxel_downsample(pts, voxel_leaf)
    return PointCloud(pts)

