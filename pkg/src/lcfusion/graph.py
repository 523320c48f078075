"""Observation containers, descriptor-level feature association and pose-graph adjacency."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import DescriptorLengthMismatch, DimensionMismatch, FormatError
from .geometry import CameraIntrinsics, Pose, back_project, transform_point

logger = logging.getLogger(__name__)


class Feature(NamedTuple):
    station: int
    pixel: np.ndarray
    depth: float
    descriptor: np.ndarray
    label: int | None = None


class CameraObservation(NamedTuple):
    camera: int
    landmark: int
    pixel: np.ndarray
    depth: float
    weight: float = 1.0


class LidarObservation(NamedTuple):
    target: int
    source: int
    p: np.ndarray
    q: np.ndarray
    normal: np.ndarray
    weight: float = 1.0


@dataclass
class FeatureSet:
    """All features of one station, stored column-wise."""

    station: int
    pixels: np.ndarray
    depths: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.depths = np.asarray(self.depths, dtype=float).reshape(-1)
        n = len(self.pixels)
        self.descriptors = np.asarray(self.descriptors, dtype=float).reshape(n, -1)
        if len(self.depths) != n:
            raise FormatError(f"station {self.station}: {n} pixels but {len(self.depths)} depths")

    def __len__(self):
        return len(self.pixels)

    def __getitem__(self, idx):
        return Feature(self.station, self.pixels[idx], float(self.depths[idx]), self.descriptors[idx])

    @property
    def descriptor_length(self):
        return self.descriptors.shape[1] if len(self) else None

    def with_valid_depth(self):
        keep = np.isfinite(self.depths) & (self.depths > 0)
        return FeatureSet(self.station, self.pixels[keep], self.depths[keep], self.descriptors[keep])

    def to_json(self):
        return {
            "station": int(self.station),
            "features": [
                {"pixel": [float(u) for u in px], "depth": float(d), "descriptor": [float(x) for x in desc]}
                for px, d, desc in zip(self.pixels, self.depths, self.descriptors)
            ],
        }

    @classmethod
    def from_json(cls, data, station=None):
        if isinstance(data, list):
            feats, st = data, station
        else:
            feats, st = data.get("features", []), data.get("station", station)
        if st is None:
            raise FormatError("feature set has no station id")
        try:
            pixels = [f["pixel"] for f in feats]
            depths = [f["depth"] for f in feats]
            descs = [f["descriptor"] for f in feats]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed feature entry: {exc}") from exc
        lengths = {len(d) for d in descs}
        if len(lengths) > 1:
            raise DescriptorLengthMismatch(f"station {st}: descriptor lengths {sorted(lengths)}")
        return cls(int(st), np.asarray(pixels, dtype=float).reshape(-1, 2), depths,
                   np.asarray(descs, dtype=float).reshape(len(feats), -1))


def save_feature_set(path, fs: FeatureSet):
    Path(path).write_text(json.dumps(fs.to_json()))


def load_feature_set(path, station=None):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read feature file {path}: {exc}") from exc
    return FeatureSet.from_json(data, station)


@dataclass
class CameraObservations:
    """Struct-of-arrays form of the camera observation set."""

    camera: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    landmark: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pixel: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    depth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.camera = np.asarray(self.camera, dtype=np.int64).reshape(-1)
        self.landmark = np.asarray(self.landmark, dtype=np.int64).reshape(-1)
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(-1, 2)
        self.depth = np.asarray(self.depth, dtype=float).reshape(-1)
        n = len(self.camera)
        self.weight = np.ones(n) if self.weight is None else np.asarray(self.weight, dtype=float).reshape(-1)
        if not (len(self.landmark) == len(self.pixel) == len(self.depth) == len(self.weight) == n):
            raise FormatError("camera observation arrays have inconsistent lengths")

    def __len__(self):
        return len(self.camera)

    def __iter__(self):
        for idx in range(len(self)):
            yield CameraObservation(int(self.camera[idx]), int(self.landmark[idx]), self.pixel[idx],
                                    float(self.depth[idx]), float(self.weight[idx]))

    def __getitem__(self, idx):
        return CameraObservation(int(self.camera[idx]), int(self.landmark[idx]), self.pixel[idx],
                                 float(self.depth[idx]), float(self.weight[idx]))

    @classmethod
    def from_list(cls, obs):
        obs = list(obs)
        if not obs:
            return cls()
        return cls([o.camera for o in obs], [o.landmark for o in obs], [o.pixel for o in obs],
                   [o.depth for o in obs], [o.weight for o in obs])

    def copy(self):
        return CameraObservations(self.camera.copy(), self.landmark.copy(), self.pixel.copy(),
                                  self.depth.copy(), self.weight.copy())

    def to_json(self):
        return [{"camera": int(c), "landmark": int(k), "pixel": [float(x) for x in u],
                 "depth": float(d), "weight": float(w)}
                for c, k, u, d, w in zip(self.camera, self.landmark, self.pixel, self.depth, self.weight)]

    @classmethod
    def from_json(cls, data):
        if not data:
            return cls()
        return cls([o["camera"] for o in data], [o["landmark"] for o in data], [o["pixel"] for o in data],
                   [o["depth"] for o in data], [o.get("weight", 1.0) for o in data])


@dataclass
class LidarObservations:
    """Struct-of-arrays form of the LiDAR observation set."""

    target: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    source: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    q: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normal: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.int64).reshape(-1)
        self.source = np.asarray(self.source, dtype=np.int64).reshape(-1)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 3)
        self.normal = np.asarray(self.normal, dtype=float).reshape(-1, 3)
        n = len(self.target)
        self.weight = np.ones(n) if self.weight is None else np.asarray(self.weight, dtype=float).reshape(-1)
        if not (len(self.source) == len(self.p) == len(self.q) == len(self.normal) == len(self.weight) == n):
            raise FormatError("lidar observation arrays have inconsistent lengths")

    def __len__(self):
        return len(self.target)

    def __iter__(self):
        for idx in range(len(self)):
            yield self[idx]

    def __getitem__(self, idx):
        return LidarObservation(int(self.target[idx]), int(self.source[idx]), self.p[idx], self.q[idx],
                                self.normal[idx], float(self.weight[idx]))

    @classmethod
    def from_list(cls, obs):
        obs = list(obs)
        if not obs:
            return cls()
        return cls([o.target for o in obs], [o.source for o in obs], [o.p for o in obs],
                   [o.q for o in obs], [o.normal for o in obs], [o.weight for o in obs])

    @classmethod
    def concatenate(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        return cls(*(np.concatenate([getattr(p, name) for p in parts])
                     for name in ("target", "source", "p", "q", "normal", "weight")))

    def copy(self):
        return LidarObservations(self.target.copy(), self.source.copy(), self.p.copy(), self.q.copy(),
                                 self.normal.copy(), self.weight.copy())

    def to_json(self):
        return [{"target": int(i), "source": int(j), "p": [float(x) for x in p], "q": [float(x) for x in q],
                 "normal": [float(x) for x in n], "weight": float(w)}
                for i, j, p, q, n, w in zip(self.target, self.source, self.p, self.q, self.normal, self.weight)]

    @classmethod
    def from_json(cls, data):
        if not data:
            return cls()
        return cls([o["target"] for o in data], [o["source"] for o in data], [o["p"] for o in data],
                   [o["q"] for o in data], [o["normal"] for o in data], [o.get("weight", 1.0) for o in data])


# -- adjacency ---------------------------------------------------------------

def adjacency_from_pairs(n, pairs):
    A = np.zeros((n, n), dtype=bool)
    for i, j in pairs:
        if i != j:
            A[i, j] = A[j, i] = True
    return A


def adjacency_pairs(A):
    """Upper-triangle edges ``(i, j)`` with ``i < j`` in row-major order."""
    A = np.asarray(A, dtype=bool)
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(A, 1)))]


def merge_adjacency(Ac, Al):
    Ac = np.asarray(Ac, dtype=bool)
    Al = np.asarray(Al, dtype=bool)
    if Ac.shape != Al.shape:
        raise DimensionMismatch(f"adjacency shapes differ: {Ac.shape} vs {Al.shape}")
    return Ac | Al


def check_connected(A):
    """Breadth-first connectivity. Returns ``(connected, components)``."""
    A = np.asarray(A, dtype=bool)
    n = A.shape[0]
    seen = np.zeros(n, dtype=bool)
    components = []
    for start in range(n):
        if seen[start]:
            continue
        comp = []
        queue = deque([start])
        seen[start] = True
        while queue:
            v = queue.popleft()
            comp.append(v)
            for u in np.nonzero(A[v] | A[:, v])[0]:
                if not seen[u]:
                    seen[u] = True
                    queue.append(int(u))
        components.append(sorted(comp))
    components.sort(key=lambda c: c[0])
    return len(components) <= 1, components


# -- Algorithm: incremental feature association -------------------------------

def _best_two(desc_i, desc_j, index):
    """Nearest and second-nearest descriptor in ``desc_j`` for each row of ``desc_i``."""
    m = len(desc_j)
    k = min(2, m)
    if index == "kdtree":
        d, idx = cKDTree(desc_j).query(desc_i, k=k)
        d = np.asarray(d).reshape(len(desc_i), k)
        idx = np.asarray(idx).reshape(len(desc_i), k)
    else:
        D = cdist(desc_i, desc_j)
        if k == 1:
            idx = np.zeros((len(desc_i), 1), dtype=np.int64)
        else:
            idx = np.argpartition(D, 1, axis=1)[:, :2]
            swap = D[np.arange(len(D)), idx[:, 0]] > D[np.arange(len(D)), idx[:, 1]]
            idx[swap] = idx[swap][:, ::-1]
        d = np.take_along_axis(D, idx, axis=1)
    best_d = d[:, 0]
    second_d = d[:, 1] if k == 2 else np.full(len(desc_i), np.inf)
    return idx[:, 0], best_d, second_d


def associate_features(feature_sets, similarity_threshold=0.3, ratio_threshold=0.8, *,
                       intrinsics: CameraIntrinsics | None = None, poses=None,
                       cross_check=False, index="brute", depth_mode="range"):
    """Scan every station pair ``(i, j>i)`` and grow landmarks by label propagation.

    A feature ``f`` of station ``i`` and its best match ``g`` in station ``j`` are
    similar when their descriptor distance is at most ``similarity_threshold``
    and passes the ratio test ``best <= ratio_threshold * second_best``.

    Returns ``(observations, landmark_positions, Ac)``. New landmarks are placed by
    back-projecting ``f`` from station ``i`` through ``poses[i]`` (identity when
    ``poses`` is None); positions are zero if no intrinsics are given.
    """
    sets = [fs.with_valid_depth() for fs in feature_sets]
    n = len(sets)
    lengths = {fs.descriptor_length for fs in sets if len(fs)}
    if len(lengths) > 1:
        raise DescriptorLengthMismatch(f"descriptor lengths differ across stations: {sorted(lengths)}")
    for fs in sets:
        if not len(fs):
            logger.warning("station %d has no features with depth; it contributes no matches", fs.station)

    labels = [np.full(len(fs), -1, dtype=np.int64) for fs in sets]
    observed = [set() for _ in range(n)]
    cams, lms, pix, deps = [], [], [], []
    positions = []
    Ac = np.zeros((n, n), dtype=bool)

    def add_obs(s, idx, k):
        labels[s][idx] = k
        observed[s].add(k)
        cams.append(s)
        lms.append(k)
        pix.append(sets[s].pixels[idx])
        deps.append(sets[s].depths[idx])

    def init_position(s, idx):
        if intrinsics is None:
            return np.zeros(3)
        xc = back_project(sets[s].pixels[idx], sets[s].depths[idx], intrinsics, depth_mode)
        return transform_point(xc, poses[s]) if poses is not None else xc

    for i in range(n):
        for j in range(i + 1, n):
            Fi, Fj = sets[i], sets[j]
            if not len(Fi) or not len(Fj):
                continue
            best, best_d, second_d = _best_two(Fi.descriptors, Fj.descriptors, index)
            similar = (best_d <= similarity_threshold) & (best_d <= ratio_threshold * second_d)
            if cross_check:
                back, _, _ = _best_two(Fj.descriptors, Fi.descriptors, index)
                similar &= back[best] == np.arange(len(Fi))
            for fi in np.nonzero(similar)[0]:
                gj = best[fi]
                lf, lg = labels[i][fi], labels[j][gj]
                if lf < 0 and lg < 0:
                    k = len(positions)
                    positions.append(init_position(i, fi))
                    add_obs(i, fi, k)
                    add_obs(j, gj, k)
                elif lf >= 0 and lg < 0:
                    if lf in observed[j]:
                        continue
                    add_obs(j, gj, lf)
                elif lf < 0 and lg >= 0:
                    if lg in observed[i]:
                        continue
                    add_obs(i, fi, lg)
                elif lf != lg:
                    continue
                Ac[i, j] = Ac[j, i] = True

    obs = CameraObservations(cams, lms, np.asarray(pix).reshape(-1, 2), deps)
    landmarks = np.asarray(positions, dtype=float).reshape(-1, 3)
    return obs, landmarks, Ac


def save_observations(path, cam: CameraObservations, lidar: LidarObservations | None = None, landmarks=None):
    data = {"camera": cam.to_json()}
    if lidar is not None:
        data["lidar"] = lidar.to_json()
    if landmarks is not None:
        data["landmarks"] = [[float(x) for x in p] for p in landmarks]
    Path(path).write_text(json.dumps(data))


def initial_poses_from_cloud_transforms(n, cloud_transforms, Te: Pose, adjacency=None):
    """Chain rough LiDAR-to-LiDAR transforms into camera poses by BFS from station 0.

    ``cloud_transforms[(i, j)]`` maps LiDAR frame ``j`` into LiDAR frame ``i``. With
    ``M_ij = (T_i T_e)^-1 T_j T_e`` the chain step is ``T_j = T_i T_e M_ij T_e^-1``.
    Stations unreachable from 0 keep the identity.
    """
    from .geometry import compose, inverse

    edges = {}
    for (i, j), M in cloud_transforms.items():
        if adjacency is not None and not adjacency[i, j]:
            continue
        edges.setdefault(i, []).append((j, M))
        edges.setdefault(j, []).append((i, inverse(M)))
    poses = [None] * n
    poses[0] = Pose.identity()
    Te_inv = inverse(Te)
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j, M in sorted(edges.get(i, []), key=lambda e: e[0]):
            if poses[j] is None:
                poses[j] = compose(compose(poses[i], Te), compose(M, Te_inv))
                queue.append(j)
    missing = [i for i, p in enumerate(poses) if p is None]
    if missing:
        logger.warning("no rough transform chain reaches stations %s", missing)
    return [p if p is not None else Pose.identity() for p in poses]
