"""Synthetic scenes with exact ground truth.

Surfaces are analytic rectangles (boxes are six of them) and cylinders. Scene
geometry is laid out in a z-up generation frame and then re-expressed in the
frame of camera 0, which is the world frame of every estimate.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .correspond import PointCloud
from .errors import InvalidSpec
from .geometry import (CameraIntrinsics, Pose, compose, inverse, pinhole, quat_from_rotvec, quat_multiply,
                       relative_cloud_transform, so3_exp, transform_point)
from .graph import CameraObservations, FeatureSet, LidarObservations, adjacency_from_pairs
from .io import dump_json


# -- surfaces ----------------------------------------------------------------

@dataclass
class Rect:
    """Rectangle ``center + a*u + b*v`` for ``|a|, |b| <= 1``; normal ``u x v``."""

    center: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)

    @property
    def normal(self):
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def area(self):
        return 4.0 * np.linalg.norm(np.cross(self.u, self.v))

    def sample(self, n, rng):
        ab = rng.uniform(-1.0, 1.0, size=(n, 2))
        return self.center + ab[:, :1] * self.u + ab[:, 1:] * self.v

    def intersect(self, origin, dirs):
        """Ray parameters (inf on miss) for rays ``origin + s * dirs``."""
        nrm = self.normal
        denom = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.center - origin) @ nrm) / denom
        hit = origin + s[:, None] * dirs - self.center
        a = hit @ self.u / (self.u @ self.u)
        b = hit @ self.v / (self.v @ self.v)
        ok = (np.abs(denom) > 1e-12) & (s > 1e-9) & (np.abs(a) <= 1) & (np.abs(b) <= 1)
        return np.where(ok, s, np.inf)

    def transformed(self, T: Pose):
        return Rect(transform_point(self.center, T), T.R @ self.u, T.R @ self.v)

    def to_dict(self):
        return {"type": "rect", "center": self.center.tolist(), "u": self.u.tolist(), "v": self.v.tolist()}


@dataclass
class Cylinder:
    center: np.ndarray
    axis: np.ndarray
    radius: float
    half_height: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.axis = np.asarray(self.axis, dtype=float) / np.linalg.norm(self.axis)

    @property
    def area(self):
        return 2 * np.pi * self.radius * 2 * self.half_height

    def _frame(self):
        a = self.axis
        e = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
        b1 = np.cross(a, e)
        b1 /= np.linalg.norm(b1)
        return b1, np.cross(a, b1)

    def sample(self, n, rng):
        b1, b2 = self._frame()
        th = rng.uniform(0, 2 * np.pi, n)
        h = rng.uniform(-self.half_height, self.half_height, n)
        return (self.center + self.radius * (np.cos(th)[:, None] * b1 + np.sin(th)[:, None] * b2)
                + h[:, None] * self.axis)

    def intersect(self, origin, dirs):
        a = self.axis
        oc = origin - self.center
        d_perp = dirs - np.outer(dirs @ a, a)
        o_perp = oc - (oc @ a) * a
        A = np.einsum("ij,ij->i", d_perp, d_perp)
        B = 2 * d_perp @ o_perp
        C = o_perp @ o_perp - self.radius ** 2
        disc = B * B - 4 * A * C
        out = np.full(len(dirs), np.inf)
        with np.errstate(invalid="ignore", divide="ignore"):
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            for s in ((-B - sq) / (2 * A), (-B + sq) / (2 * A)):
                h = (oc @ a) + s * (dirs @ a)
                ok = np.isfinite(s) & (s > 1e-9) & (np.abs(h) <= self.half_height) & (s < out)
                out = np.where(ok, s, out)
        return out

    def transformed(self, T: Pose):
        return Cylinder(transform_point(self.center, T), T.R @ self.axis, self.radius, self.half_height)

    def to_dict(self):
        return {"type": "cylinder", "center": self.center.tolist(), "axis": self.axis.tolist(),
                "radius": self.radius, "half_height": self.half_height}


def box(center, size):
    """Six outward-facing rectangles of an axis-aligned box."""
    c = np.asarray(center, dtype=float)
    hx, hy, hz = np.asarray(size, dtype=float) / 2
    ex, ey, ez = np.eye(3)
    return [
        Rect(c + hx * ex, hy * ey, hz * ez), Rect(c - hx * ex, hz * ez, hy * ey),
        Rect(c + hy * ey, hz * ez, hx * ex), Rect(c - hy * ey, hx * ex, hz * ez),
        Rect(c + hz * ez, hx * ex, hy * ey), Rect(c - hz * ez, hy * ey, hx * ex),
    ]


def surface_from_dict(d):
    kind = d.get("type")
    if kind in ("rect", "plane"):
        return [Rect(d["center"], d["u"], d["v"])]
    if kind == "box":
        return box(d["center"], d["size"])
    if kind == "cylinder":
        return [Cylinder(d["center"], d["axis"], d["radius"], d["half_height"])]
    raise InvalidSpec(f"surfaces: unknown surface type {kind!r}")


def default_room():
    """Floor, three walls and two boxes: planes with many normal directions."""
    ex, ey, ez = np.eye(3)
    return [
        Rect([0, -0.5, 0], 2.2 * ex, 2.0 * ey),             # floor, normal +z
        Rect([0, 1.5, 1.25], 1.25 * ez, 2.2 * ex),          # back wall, normal -y
        Rect([-2.2, -0.5, 1.25], 2.0 * ey, 1.25 * ez),      # left wall, normal +x
        Rect([2.2, -0.5, 1.25], 1.25 * ez, 2.0 * ey),       # right wall, normal -x
        *box([0.5, 0.6, 0.4], [0.7, 0.5, 0.8]),
        *box([-0.9, 0.9, 0.35], [0.6, 0.7, 0.7]),
    ]


def sample_surfaces(surfaces, n, rng):
    """Area-weighted uniform samples; returns points and the surface index of each."""
    areas = np.array([s.area for s in surfaces])
    # one uniform draw per point rather than a multinomial, whose counts jump with
    # roundoff in the areas (a rigidly moved scene must sample the same points)
    cum = np.cumsum(areas) / areas.sum()
    pick = np.minimum(np.searchsorted(cum, rng.random(n), side="right"), len(surfaces) - 1)
    counts = np.bincount(pick, minlength=len(surfaces))
    pts = [s.sample(c, rng) for s, c in zip(surfaces, counts)]
    ids = np.repeat(np.arange(len(surfaces)), counts)
    return np.concatenate(pts) if pts else np.zeros((0, 3)), ids


def cast_rays(surfaces, origin, dirs):
    """Nearest hit distance along each ray (inf on miss) and the surface hit."""
    best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1)
    for k, s in enumerate(surfaces):
        d = s.intersect(origin, dirs)
        closer = d < best
        best[closer] = d[closer]
        which[closer] = k
    return best, which


def render_depth(surfaces, pose: Pose, K: CameraIntrinsics, size=None):
    """Exact z-depth image and hit-surface index (``-1``, NaN where nothing is hit).

    ``surfaces`` are in the world frame, ``pose`` is camera-to-world.
    """
    w, h = (int(size[0]), int(size[1])) if size is not None else (int(K.width), int(K.height))
    rows, cols = np.indices((h, w))
    d = np.column_stack([(cols.ravel() - K.cx) / K.fx, (rows.ravel() - K.cy) / K.fy, np.ones(w * h)])
    dirs = d @ pose.R.T
    s, which = cast_rays(surfaces, pose.translation, dirs)
    z = np.where(np.isfinite(s), s, np.nan)   # ray parameter along (x, y, 1) is the z-depth
    return z.reshape(h, w), which.reshape(h, w)


def surface_normals(surfaces, points, which):
    """Exact unit normals of ``points`` lying on ``surfaces[which]``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    out = np.zeros_like(points)
    for k, s in enumerate(surfaces):
        m = which == k
        if not m.any():
            continue
        if isinstance(s, Cylinder):
            r = points[m] - s.center
            r -= np.outer(r @ s.axis, s.axis)
            out[m] = r / np.linalg.norm(r, axis=1, keepdims=True)
        else:
            out[m] = s.normal
    return out


def truth_cloud(surfaces, n, rng) -> PointCloud:
    """Dense samples with exact normals and zero curvature, as an evaluation reference."""
    pts, which = sample_surfaces(surfaces, n, rng)
    return PointCloud(pts, surface_normals(surfaces, pts, which), np.zeros(len(pts)))


def scale_intrinsics(K: CameraIntrinsics, scale) -> CameraIntrinsics:
    """Intrinsics of the image resampled by ``scale`` (pixel centres at integers)."""
    return CameraIntrinsics(K.fx * scale, K.fy * scale, (K.cx + 0.5) * scale - 0.5, (K.cy + 0.5) * scale - 0.5,
                            K.baseline, int(round(K.width * scale)), int(round(K.height * scale)))


@dataclass
class StereoSpec:
    scale: float = 0.1
    sigma: float = 0.01
    # noise is clipped at clip * sigma so inliers and outliers are separable by construction
    clip: float = 3.0
    outlier_fraction: float = 0.05
    outlier_offset: tuple = (0.15, 0.5)
    holes: int = 20
    hole_radius: tuple = (3.0, 8.0)


def simulate_stereo_depth(surfaces, pose: Pose, K: CameraIntrinsics, spec: StereoSpec, rng):
    """Noisy z-depth image with labeled outliers and disc-shaped holes.

    Returns ``(depth, truth, outliers, holes)``; ``depth`` is NaN in holes and
    where nothing is hit.
    """
    truth, _ = render_depth(surfaces, pose, K)
    h, w = truth.shape
    noise = rng.normal(0.0, spec.sigma, truth.shape) if spec.sigma > 0 else np.zeros(truth.shape)
    if spec.clip:
        noise = np.clip(noise, -spec.clip * spec.sigma, spec.clip * spec.sigma)
    depth = truth + noise
    outliers = rng.random(truth.shape) < spec.outlier_fraction
    sign = np.where(rng.random(truth.shape) < 0.5, -1.0, 1.0)
    depth = np.where(outliers, depth + sign * rng.uniform(*spec.outlier_offset, truth.shape), depth)
    holes = np.zeros(truth.shape, dtype=bool)
    rows, cols = np.indices(truth.shape)
    for _ in range(spec.holes):
        r0, c0 = rng.integers(0, h), rng.integers(0, w)
        rad = rng.uniform(*spec.hole_radius)
        holes |= (rows - r0) ** 2 + (cols - c0) ** 2 <= rad ** 2
    depth[holes] = np.nan
    depth[~(depth > 0)] = np.nan
    outliers &= np.isfinite(depth)
    return depth, truth, outliers, holes


# -- poses -------------------------------------------------------------------

def look_at(position, target, up=(0, 0, 1)):
    """Camera-to-world pose with z toward ``target`` and y pointing down."""
    position = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - position
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return Pose.from_rt(np.column_stack([r, d, f]), position)


def perturb_pose(P: Pose, trans_sigma, rot_sigma, seed=None) -> Pose:
    """Gaussian translation offset and a Gaussian-angle rotation about a uniform random axis."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dt = rng.normal(0.0, trans_sigma, 3) if trans_sigma > 0 else np.zeros(3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.normal(0.0, rot_sigma) if rot_sigma > 0 else 0.0
    return Pose(quat_multiply(quat_from_rotvec(axis * angle), P.rotation), P.translation + dt)


def offset_pose(P: Pose, distance, angle, seed=None) -> Pose:
    """Move by exactly ``distance`` and rotate by exactly ``angle`` in random directions."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = rng.normal(size=3)
    a = rng.normal(size=3)
    d *= distance / np.linalg.norm(d)
    a *= angle / np.linalg.norm(a)
    return Pose(quat_multiply(quat_from_rotvec(a), P.rotation), P.translation + d)


def default_extrinsic():
    """LiDAR (x forward, z up) mounted slightly above and beside the camera."""
    base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    R = so3_exp(np.radians([2.0, -1.5, 3.0])) @ base
    return Pose.from_rt(R, [0.06, -0.15, 0.03])


# -- scene specification -----------------------------------------------------

@dataclass
class Noise:
    pixel: float = 0.0
    depth_multiplier: float = 0.0   # depth sigma = multiplier * d^2 / (b f)
    range: float = 0.0


@dataclass
class Outliers:
    feature_fraction: float = 0.0
    feature_pixels: float = 30.0
    depth_fraction: float = 0.0
    depth_offset: float = 0.1
    cloud_fraction: float = 0.0
    # at most one corrupted observation per landmark, so every outlier stays identifiable
    one_per_landmark: bool = False


@dataclass
class SceneSpec:
    stations: int = 5
    generator: str = "orbit"        # orbit | line | custom
    radius: float = 2.5
    azimuth_span: float = 100.0     # degrees
    tilt: float = 12.0              # degrees, alternating pitch; 0 keeps every rotation about one axis
    height: float = 1.2
    height_variation: float = 0.3
    target: tuple = (0.0, 0.4, 0.8)
    line_spacing: float = 0.8
    custom_poses: list | None = None
    extrinsic: Pose | None = None
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(
        3000.0, 3000.0, 2000.0, 1500.0, 0.38, 4000, 3000))
    landmarks: int = 300
    observers_per_landmark: int | None = None
    min_observers: int = 2
    camera_pairs: list | None = None
    lidar_pairs: list | None = None
    surfaces: list | None = None
    cloud_points: int = 30000
    noise: Noise = field(default_factory=Noise)
    outliers: Outliers = field(default_factory=Outliers)
    descriptor_dim: int = 32
    descriptor_noise: float = 0.0
    confusers: int = 0
    rough_translation: float = 0.05
    rough_rotation: float = 0.02
    seed: int = 0

    def validate(self):
        def bad(name, why):
            raise InvalidSpec(f"{name}: {why}")

        if not isinstance(self.stations, int) or self.stations < 1:
            bad("stations", f"must be an integer >= 1, got {self.stations!r}")
        if self.generator not in ("orbit", "line", "custom"):
            bad("generator", f"must be orbit, line or custom, got {self.generator!r}")
        if self.generator == "custom" and (not self.custom_poses or len(self.custom_poses) != self.stations):
            bad("custom_poses", "must list one pose per station")
        if self.landmarks < 0:
            bad("landmarks", "must be >= 0")
        if self.cloud_points < 0:
            bad("cloud_points", "must be >= 0")
        for name in ("pixel", "depth_multiplier", "range"):
            if getattr(self.noise, name) < 0:
                bad(f"noise.{name}", "must be >= 0")
        for name in ("feature_fraction", "depth_fraction", "cloud_fraction"):
            v = getattr(self.outliers, name)
            if not 0 <= v < 1:
                bad(f"outliers.{name}", "must lie in [0, 1)")
        if self.descriptor_noise < 0:
            bad("descriptor_noise", "must be >= 0")
        if self.observers_per_landmark is not None and self.observers_per_landmark < 2:
            bad("observers_per_landmark", "must be >= 2")
        if not 2 <= self.min_observers <= self.stations:
            bad("min_observers", f"must lie in [2, stations], got {self.min_observers!r}")
        if self.observers_per_landmark is not None and self.observers_per_landmark < self.min_observers:
            bad("observers_per_landmark", "must be >= min_observers")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"{sorted(unknown)[0]}: unknown field")
        try:
            if "noise" in d:
                d["noise"] = Noise(**d["noise"])
            if "outliers" in d:
                d["outliers"] = Outliers(**d["outliers"])
            if "intrinsics" in d:
                d["intrinsics"] = CameraIntrinsics.from_dict(d["intrinsics"])
            if d.get("extrinsic") is not None:
                d["extrinsic"] = Pose.from_dict(d["extrinsic"])
            if "target" in d:
                d["target"] = tuple(d["target"])
            spec = cls(**d)
        except (TypeError, ValueError, KeyError) as exc:
            raise InvalidSpec(f"scene spec: {exc}") from exc
        spec.validate()
        return spec


@dataclass
class GroundTruth:
    poses: list
    extrinsic: Pose
    landmarks: np.ndarray
    intrinsics: CameraIntrinsics
    surfaces: list
    feature_labels: list          # per station: true landmark id, -1 for confusers
    feature_outliers: list        # per station: bool, pixel or depth corrupted
    cloud_outliers: list          # per station: bool
    cloud_surface: list           # per station: surface index of each point

    def to_json(self):
        return {
            "poses": [p.to_dict() for p in self.poses],
            "extrinsic": self.extrinsic.to_dict(),
            "landmarks": self.landmarks.tolist(),
            "intrinsics": self.intrinsics.to_dict(),
            "surfaces": [s.to_dict() for s in self.surfaces],
            "feature_labels": [lab.tolist() for lab in self.feature_labels],
            "feature_outliers": [o.astype(int).tolist() for o in self.feature_outliers],
            "cloud_outliers": [o.astype(int).tolist() for o in self.cloud_outliers],
        }


@dataclass
class SyntheticData:
    feature_sets: list
    clouds: list
    cloud_transforms: dict        # (i, j) -> rough LiDAR j -> LiDAR i transform
    truth: GroundTruth
    spec: SceneSpec

    @property
    def lidar_adjacency(self):
        return adjacency_from_pairs(len(self.clouds), self.cloud_transforms.keys())


def _generation_poses(spec: SceneSpec):
    n = spec.stations
    if spec.generator == "custom":
        return [Pose.from_dict(p) if isinstance(p, dict) else p for p in spec.custom_poses]
    if spec.generator == "line":
        xs = (np.arange(n) - (n - 1) / 2) * spec.line_spacing
        ref = look_at([0, -spec.radius, spec.height], [0, 0, spec.height])
        return [Pose(ref.rotation, [x, -spec.radius, spec.height]) for x in xs]
    az = np.radians(-90 + np.linspace(-spec.azimuth_span / 2, spec.azimuth_span / 2, n)) if n > 1 \
        else np.radians([-90.0])
    target = np.asarray(spec.target, dtype=float)
    poses = []
    for k, a in enumerate(az):
        if spec.tilt == 0:
            h = spec.height
            pos = np.array([target[0] + spec.radius * np.cos(a), target[1] + spec.radius * np.sin(a), h])
            P = look_at(pos, [target[0], target[1], h])
        else:
            h = spec.height + spec.height_variation * ((-1) ** k) * (k > 0)
            pos = np.array([target[0] + spec.radius * np.cos(a), target[1] + spec.radius * np.sin(a), h])
            P = look_at(pos, target)
            sign = 1 if k % 2 == 0 else -1
            tilt = np.radians(spec.tilt) * sign * (k > 0)
            P = compose(P, Pose.from_rotvec([tilt, 0, 0]))
        poses.append(P)
    return poses


def _visible(xc, K: CameraIntrinsics, margin=2.0):
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = pinhole(xc, K)
    w = K.width or 2 * K.cx
    h = K.height or 2 * K.cy
    return (z > 0.3) & (uv[:, 0] >= margin) & (uv[:, 0] <= w - margin) & (uv[:, 1] >= margin) & (
        uv[:, 1] <= h - margin)


def _draw_feature_outliers(observers, n, out: Outliers, rng):
    """Per-station pixel / depth outlier flags aligned with the station's landmark ids."""
    per_station = [[k for k, obs in enumerate(observers) if s in obs] for s in range(n)]
    pix = [np.zeros(len(ids), dtype=bool) for ids in per_station]
    dep = [np.zeros(len(ids), dtype=bool) for ids in per_station]
    total = out.feature_fraction + out.depth_fraction
    if total <= 0:
        return pix, dep
    if not out.one_per_landmark:
        for s, ids in enumerate(per_station):
            pix[s] = rng.random(len(ids)) < out.feature_fraction
            dep[s] = rng.random(len(ids)) < out.depth_fraction
        return pix, dep
    position = [{k: idx for idx, k in enumerate(ids)} for ids in per_station]
    for k, obs in enumerate(observers):
        if rng.random() >= min(1.0, total * len(obs)):
            continue
        s = obs[rng.integers(len(obs))]
        target = pix if rng.random() < out.feature_fraction / total else dep
        target[s][position[s][k]] = True
    return pix, dep


def generate(spec: SceneSpec) -> SyntheticData:
    """Generate feature sets, raw LiDAR clouds, rough cloud transforms and ground truth."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    K = spec.intrinsics
    n = spec.stations
    gen_poses = _generation_poses(spec)
    to_world = inverse(gen_poses[0])
    poses = [Pose.identity()] + [compose(to_world, P) for P in gen_poses[1:]]
    Te = spec.extrinsic if spec.extrinsic is not None else default_extrinsic()
    base = [s for d in spec.surfaces for s in surface_from_dict(d)] if spec.surfaces else default_room()
    surfaces = [s.transformed(to_world) for s in base]
    cam_to_world_inv = [inverse(P) for P in poses]

    # landmarks: surface samples seen by at least two cameras
    allowed_pairs = [tuple(sorted(p)) for p in spec.camera_pairs] if spec.camera_pairs else None
    positions, observers = [], []
    attempts = 0
    while len(positions) < spec.landmarks and attempts < 200:
        attempts += 1
        cand, _ = sample_surfaces(surfaces, max(4 * (spec.landmarks - len(positions)), 64), rng)
        vis = np.stack([_visible(transform_point(cand, Tinv), K) for Tinv in cam_to_world_inv], axis=1)
        for x, v in zip(cand, vis):
            if len(positions) >= spec.landmarks:
                break
            seen = np.nonzero(v)[0]
            if len(seen) < spec.min_observers:
                continue
            if allowed_pairs is not None:
                ok = [p for p in allowed_pairs if v[p[0]] and v[p[1]]]
                if not ok:
                    continue
                obs = list(ok[rng.integers(len(ok))])
            elif spec.observers_per_landmark is not None and len(seen) > spec.observers_per_landmark:
                obs = sorted(rng.choice(seen, spec.observers_per_landmark, replace=False).tolist())
            else:
                obs = seen.tolist()
            positions.append(x)
            observers.append(obs)
    if len(positions) < spec.landmarks:
        raise InvalidSpec(f"landmarks: only {len(positions)} of {spec.landmarks} could be placed in view")
    landmarks = np.asarray(positions).reshape(-1, 3)
    descriptors = rng.normal(size=(len(landmarks), spec.descriptor_dim))
    descriptors /= np.linalg.norm(descriptors, axis=1, keepdims=True)

    pix_bad, dep_bad = _draw_feature_outliers(observers, n, spec.outliers, rng)
    feature_sets, labels, f_outliers = [], [], []
    for s in range(n):
        ids = np.array([k for k, obs in enumerate(observers) if s in obs], dtype=np.int64)
        xc = transform_point(landmarks[ids], cam_to_world_inv[s]).reshape(-1, 3)
        uv = pinhole(xc, K) if len(ids) else np.zeros((0, 2))
        rng_true = np.linalg.norm(xc, axis=1)
        uv = uv + rng.normal(0.0, spec.noise.pixel, uv.shape) if spec.noise.pixel > 0 else uv
        dsig = spec.noise.depth_multiplier * rng_true ** 2 / (K.baseline * K.fx)
        depth = rng_true + (rng.normal(size=len(ids)) * dsig if spec.noise.depth_multiplier > 0 else 0.0)
        desc = descriptors[ids]
        if spec.descriptor_noise > 0:
            desc = desc + rng.normal(0.0, spec.descriptor_noise, desc.shape)
        bad = np.zeros(len(ids), dtype=bool)
        if spec.outliers.feature_fraction > 0 and len(ids):
            pick = pix_bad[s]
            ang = rng.uniform(0, 2 * np.pi, len(ids))
            shift = spec.outliers.feature_pixels * np.column_stack([np.cos(ang), np.sin(ang)])
            uv = np.where(pick[:, None], uv + shift, uv)
            bad |= pick
        if spec.outliers.depth_fraction > 0 and len(ids):
            pick = dep_bad[s] & ~bad
            sign = np.where(rng.random(len(ids)) < 0.5, -1.0, 1.0)
            depth = np.where(pick, depth + sign * spec.outliers.depth_offset, depth)
            bad |= pick
        lab = ids.copy()
        if spec.confusers > 0:
            w = K.width or 2 * K.cx
            h = K.height or 2 * K.cy
            cu = np.column_stack([rng.uniform(0, w, spec.confusers), rng.uniform(0, h, spec.confusers)])
            cd = rng.uniform(1.0, 6.0, spec.confusers)
            cdesc = rng.normal(size=(spec.confusers, spec.descriptor_dim))
            cdesc /= np.linalg.norm(cdesc, axis=1, keepdims=True)
            uv = np.vstack([uv, cu])
            depth = np.concatenate([depth, cd])
            desc = np.vstack([desc, cdesc])
            lab = np.concatenate([lab, np.full(spec.confusers, -1)])
            bad = np.concatenate([bad, np.zeros(spec.confusers, dtype=bool)])
        feature_sets.append(FeatureSet(s, uv, depth, desc))
        labels.append(lab)
        f_outliers.append(bad)

    clouds, c_outliers, c_surface = [], [], []
    for s in range(n):
        pts, sid = sample_surfaces(surfaces, spec.cloud_points, rng)
        local = transform_point(pts, inverse(compose(poses[s], Te))).reshape(-1, 3)
        if spec.noise.range > 0:
            ray = local / np.linalg.norm(local, axis=1, keepdims=True)
            local = local + ray * rng.normal(0.0, spec.noise.range, (len(local), 1))
        bad = np.zeros(len(local), dtype=bool)
        if spec.outliers.cloud_fraction > 0:
            bad = rng.random(len(local)) < spec.outliers.cloud_fraction
            ray = local / np.linalg.norm(local, axis=1, keepdims=True)
            local = np.where(bad[:, None], local + ray * rng.uniform(0.2, 1.0, (len(local), 1)), local)
        clouds.append(PointCloud(local))
        c_outliers.append(bad)
        c_surface.append(sid)

    pairs = [tuple(sorted(p)) for p in spec.lidar_pairs] if spec.lidar_pairs is not None else [
        (i, j) for i in range(n) for j in range(i + 1, n)]
    transforms = {}
    for i, j in pairs:
        M = relative_cloud_transform(poses[i], poses[j], Te)
        transforms[(i, j)] = perturb_pose(M, spec.rough_translation, spec.rough_rotation, rng)

    truth = GroundTruth(poses, Te, landmarks, K, surfaces, labels, f_outliers, c_outliers, c_surface)
    return SyntheticData(feature_sets, clouds, transforms, truth, spec)


def truth_camera_observations(data: SyntheticData):
    """Camera observations with ground-truth landmark ids (confusers dropped)."""
    cams, lms, pix, dep = [], [], [], []
    for fs, lab in zip(data.feature_sets, data.truth.feature_labels):
        keep = lab >= 0
        cams.append(np.full(keep.sum(), fs.station))
        lms.append(lab[keep])
        pix.append(fs.pixels[keep])
        dep.append(fs.depths[keep])
    return CameraObservations(np.concatenate(cams), np.concatenate(lms), np.concatenate(pix),
                              np.concatenate(dep))


def inject_lidar_outliers(obs: LidarObservations, fraction, magnitude, seed=None):
    """Shift ``q`` of a random subset along its normal by ``magnitude``; returns the labels."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pick = rng.random(len(obs)) < fraction
    sign = np.where(rng.random(len(obs)) < 0.5, -1.0, 1.0)
    obs.q[pick] += (sign[pick] * magnitude)[:, None] * obs.normal[pick]
    return pick


# -- disk output ---------------------------------------------------------------

def write_dataset(data: SyntheticData, out_dir):
    """Write the dataset in the same formats the pipeline reads."""
    from .graph import save_feature_set

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fs in data.feature_sets:
        save_feature_set(out / f"features_{fs.station:03d}.json", fs)
    for s, c in enumerate(data.clouds):
        c.save(out / f"cloud_{s:03d}.ply")
    dump_json(out / "rough_transforms.json", {"pairs": [
        {"target": i, "source": j, **M.to_dict()} for (i, j), M in sorted(data.cloud_transforms.items())]})
    dump_json(out / "intrinsics.json", data.truth.intrinsics.to_dict())
    dump_json(out / "truth.json", data.truth.to_json())
    return out
