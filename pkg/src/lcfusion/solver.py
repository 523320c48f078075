"""Joint bundle adjustment and point-to-plane registration.

The cost is

    f = 1/2 sum_c w_c (|E_f|^2 + E_d^2) + 1/2 sum_l w_l E_l^2

with reprojection ``E_f = (phi(l_k) - u) / sigma_p`` (a 2-vector), depth
``E_d = (range - d) / sigma_d`` and point-to-plane ``E_l = n.(M_ij p - q) / sigma_l``.
It is minimized with Levenberg-Marquardt over the poses of stations 1..N-1,
the landmark positions and the extrinsic. Landmarks are eliminated with a
Schur complement before each linear solve.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .correspond import PointCloud, default_keypoints, extract_lidar_observations
from .errors import AllObservationsGated, ConfigError, Diverged, NonPositiveDepth, SingularNormalEquations
from .geometry import (MIN_DEPTH, CameraIntrinsics, Pose, inverse, pinhole, project,
                       relative_cloud_transform, skew, transform_point)
from .graph import CameraObservation, CameraObservations, LidarObservation, LidarObservations

logger = logging.getLogger(__name__)


# -- configuration -----------------------------------------------------------

@dataclass
class Sigmas:
    pixel: float = 1.0
    lidar: float = 0.05
    # constant depth sigma; None uses d^2 / (b f) * sigma_p per observation
    depth: float | None = None


@dataclass
class Thresholds:
    reproj: float = 3.0
    depth: float = 0.01
    lidar: float = 0.1


@dataclass
class AssociationConfig:
    max_dist: float = 0.1
    keypoints_per_cloud: int = 2000
    seed: int = 0
    resample: bool = False
    max_curvature: float | None = 0.05
    normal_k: int = 20


@dataclass
class SolverConfig:
    sigmas: Sigmas = field(default_factory=Sigmas)
    thresholds: Thresholds = field(default_factory=Thresholds)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    reassociation_rounds: int = 4
    max_iterations: int = 200
    max_gating_passes: int = 20
    # "progressive" gates the worst offenders first; "threshold" gates everything over the limits at once
    gating: str = "progressive"
    gating_fraction: float = 0.5
    depth_mode: str = "range"
    optimize_extrinsic: bool = True
    # False zeroes every LiDAR weight (camera-only bundle adjustment)
    use_lidar: bool = True
    initial_extrinsic: Pose | None = None
    huber: float | None = None
    on_singular: str = "raise"
    singular_tol: float = 1e-9
    lambda_init: float = 1e-4
    cost_tol: float = 1e-10
    gradient_tol: float = 1e-10
    # largest accepted update (m or rad) still counted as progress; below it only roundoff moves
    step_tol: float = 1e-12

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["initial_extrinsic"] = None if self.initial_extrinsic is None else self.initial_extrinsic.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown solver options: {sorted(unknown)}")
        try:
            if "sigmas" in d:
                d["sigmas"] = Sigmas(**d["sigmas"])
            if "thresholds" in d:
                d["thresholds"] = Thresholds(**d["thresholds"])
            if "association" in d:
                d["association"] = AssociationConfig(**d["association"])
            if d.get("initial_extrinsic") is not None:
                d["initial_extrinsic"] = Pose.from_dict(d["initial_extrinsic"])
            cfg = cls(**d)
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid solver config: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self):
        if self.depth_mode not in ("range", "z"):
            raise ConfigError(f"depth_mode must be 'range' or 'z', got {self.depth_mode!r}")
        if self.gating not in ("progressive", "threshold"):
            raise ConfigError(f"gating must be 'progressive' or 'threshold', got {self.gating!r}")
        if self.on_singular not in ("raise", "warn"):
            raise ConfigError(f"on_singular must be 'raise' or 'warn', got {self.on_singular!r}")
        if self.reassociation_rounds < 0 or self.max_iterations < 1:
            raise ConfigError("reassociation_rounds must be >= 0 and max_iterations >= 1")
        if self.sigmas.pixel <= 0 or self.sigmas.lidar <= 0:
            raise ConfigError("sigmas must be positive")


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    DIVERGED = "Diverged"


@dataclass
class SolveReport:
    final_cost: float
    iterations: int
    outliers: tuple = (0, 0)
    reassociation_rounds: int = 0
    status: Status = Status.CONVERGED
    initial_cost: float = float("nan")
    unconstrained: list = field(default_factory=list)

    def to_dict(self):
        return {
            "final_cost": float(self.final_cost),
            "initial_cost": float(self.initial_cost),
            "iterations": int(self.iterations),
            "outliers": {"camera": int(self.outliers[0]), "lidar": int(self.outliers[1])},
            "reassociation_rounds": int(self.reassociation_rounds),
            "status": self.status.value,
            "unconstrained": list(self.unconstrained),
        }


# -- problem -----------------------------------------------------------------

@dataclass(eq=False)
class Problem:
    """The optimization state together with its observations.

    ``poses[0]`` is the gauge and must stay the identity.
    """

    poses: list
    landmarks: np.ndarray
    extrinsic: Pose
    camera_obs: CameraObservations
    lidar_obs: LidarObservations
    intrinsics: CameraIntrinsics
    sigma_pixel: float = 1.0
    sigma_lidar: float = 0.05
    sigma_depth: float | None = None
    depth_mode: str = "range"
    clouds: list | None = None
    lidar_adjacency: np.ndarray | None = None
    keypoints: list | None = None

    def __post_init__(self):
        self.poses = list(self.poses)
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 3)
        if self.camera_obs is None:
            self.camera_obs = CameraObservations()
        if self.lidar_obs is None:
            self.lidar_obs = LidarObservations()
        first = self.poses[0]
        if np.abs(first.as_vector() - Pose.identity().as_vector()).max() > 1e-9:
            raise ValueError("poses[0] must be the identity (gauge)")
        self.poses[0] = Pose.identity()
        self.validate()

    def validate(self):
        n, m = len(self.poses), len(self.landmarks)
        c = self.camera_obs
        if len(c) and (c.camera.min() < 0 or c.camera.max() >= n or c.landmark.min() < 0
                       or c.landmark.max() >= m):
            raise ValueError("camera observation references an unknown station or landmark")
        lo = self.lidar_obs
        if len(lo):
            if lo.target.min() < 0 or lo.source.max() >= n:
                raise ValueError("lidar observation references an unknown station")
            if np.any(lo.target >= lo.source):
                raise ValueError("lidar observations need target < source")

    @property
    def num_stations(self):
        return len(self.poses)

    def copy(self):
        return dataclasses.replace(self, poses=list(self.poses), landmarks=self.landmarks.copy(),
                                   camera_obs=self.camera_obs.copy(), lidar_obs=self.lidar_obs.copy())

    def apply_config(self, config: SolverConfig):
        self.sigma_pixel = config.sigmas.pixel
        self.sigma_lidar = config.sigmas.lidar
        self.sigma_depth = config.sigmas.depth
        self.depth_mode = config.depth_mode

    def depth_sigmas(self):
        d = self.camera_obs.depth
        if self.sigma_depth is not None:
            return np.full(len(d), float(self.sigma_depth))
        K = self.intrinsics
        return d * d / (K.baseline * K.fx) * self.sigma_pixel


# -- single-observation residuals (reference path, built from geometry ops) ---

def _camera_point(o: CameraObservation, prob: Problem):
    xc = transform_point(prob.landmarks[o.landmark], inverse(prob.poses[o.camera]))
    if xc[2] <= MIN_DEPTH:
        raise NonPositiveDepth(f"landmark {o.landmark} is behind camera {o.camera}")
    return xc


def residual_feature(o: CameraObservation, prob: Problem):
    """Reprojection residual ``(phi - u) / sigma_p`` as a 2-vector."""
    uv = project(prob.landmarks[o.landmark], inverse(prob.poses[o.camera]), prob.intrinsics)
    return (uv - np.asarray(o.pixel)) / prob.sigma_pixel


def depth_sigma(d, intrinsics: CameraIntrinsics, sigma_pixel=1.0):
    return d * d / (intrinsics.baseline * intrinsics.fx) * sigma_pixel


def residual_depth(o: CameraObservation, prob: Problem):
    xc = _camera_point(o, prob)
    measured = np.linalg.norm(xc) if prob.depth_mode == "range" else xc[2]
    sigma = prob.sigma_depth if prob.sigma_depth is not None else depth_sigma(
        o.depth, prob.intrinsics, prob.sigma_pixel)
    return (measured - o.depth) / sigma


def residual_lidar(o: LidarObservation, prob: Problem):
    M = relative_cloud_transform(prob.poses[o.target], prob.poses[o.source], prob.extrinsic)
    return float(np.dot(o.normal, transform_point(o.p, M) - o.q)) / prob.sigma_lidar


def total_cost(prob: Problem):
    ev = _evaluate(prob, jacobians=False)
    wc = prob.camera_obs.weight * ev.cam_valid
    wl = prob.lidar_obs.weight
    return 0.5 * float(np.sum(wc * np.sum(ev.cam_r ** 2, axis=1))) + 0.5 * float(np.sum(wl * ev.lidar_r ** 2))


# -- vectorized evaluation ---------------------------------------------------

@dataclass
class Evaluation:
    cam_r: np.ndarray            # (n, 3): two reprojection components and depth
    cam_valid: np.ndarray        # (n,) landmark in front of the camera
    lidar_r: np.ndarray          # (m,)
    cam_J_pose: np.ndarray | None = None   # (n, 3, 6)
    cam_J_land: np.ndarray | None = None   # (n, 3, 3)
    lidar_J_target: np.ndarray | None = None  # (m, 6)
    lidar_J_source: np.ndarray | None = None  # (m, 6)
    lidar_J_extr: np.ndarray | None = None    # (m, 6)


def _pose_arrays(poses):
    R = np.stack([p.R for p in poses])
    t = np.stack([p.translation for p in poses])
    return R, t


def _evaluate(prob: Problem, jacobians=True):
    R, t = _pose_arrays(prob.poses)
    K = prob.intrinsics
    c = prob.camera_obs
    n = len(c)

    Rc = R[c.camera]
    diff = prob.landmarks[c.landmark] - t[c.camera]
    xc = np.einsum("nji,nj->ni", Rc, diff)
    z = xc[:, 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    uv = pinhole(np.column_stack([xc[:, :2], zs]), K)
    sp_ = prob.sigma_pixel
    sd = prob.depth_sigmas()
    rng = np.linalg.norm(xc, axis=1) if prob.depth_mode == "range" else z
    cam_r = np.empty((n, 3))
    cam_r[:, :2] = (uv - c.pixel) / sp_
    cam_r[:, 2] = (rng - c.depth) / sd
    cam_r[~valid] = 0.0

    Re, te = prob.extrinsic.R, prob.extrinsic.translation
    lo = prob.lidar_obs
    Ri, ti = R[lo.target], t[lo.target]
    Rj, tj = R[lo.source], t[lo.source]
    Rep = lo.p @ Re.T
    a = Rep + te
    Rja = np.einsum("nij,nj->ni", Rj, a)
    w = Rja + tj
    wi = w - ti
    cpt = np.einsum("nji,nj->ni", Ri, wi)
    y = (cpt - te) @ Re
    sl = prob.sigma_lidar
    lidar_r = np.einsum("ni,ni->n", lo.normal, y - lo.q) / sl

    ev = Evaluation(cam_r, valid, lidar_r)
    if not jacobians:
        return ev

    # camera: d xc / d(rho, theta) = [-R^T, R^T [l - t]x], d xc / d l = R^T
    Jx = np.zeros((n, 3, 3))
    inv_z = 1.0 / zs
    Jx[:, 0, 0] = K.fx * inv_z
    Jx[:, 0, 2] = -K.fx * xc[:, 0] * inv_z ** 2
    Jx[:, 1, 1] = K.fy * inv_z
    Jx[:, 1, 2] = -K.fy * xc[:, 1] * inv_z ** 2
    Jx[:, :2] /= sp_
    if prob.depth_mode == "range":
        Jx[:, 2] = xc / np.where(rng > 0, rng, 1.0)[:, None]
    else:
        Jx[:, 2, 2] = 1.0
    Jx[:, 2] /= sd[:, None]
    Jx[~valid] = 0.0
    RcT = np.transpose(Rc, (0, 2, 1))
    J_land = Jx @ RcT
    J_pose = np.concatenate([-J_land, J_land @ skew(diff)], axis=2)
    ev.cam_J_pose, ev.cam_J_land = J_pose, J_land

    # lidar: y = Re^T (Ri^T (Rj (Re p + te) + tj - ti) - te)
    g_c = (lo.normal @ Re.T) / sl                  # n^T Re^T
    g_w = np.einsum("ni,nji->nj", g_c, Ri)          # n^T Re^T Ri^T
    J_target = np.concatenate([-g_w, np.einsum("ni,nij->nj", g_w, skew(wi))], axis=1)
    J_source = np.concatenate([g_w, -np.einsum("ni,nij->nj", g_w, skew(Rja))], axis=1)
    g_wRj = np.einsum("ni,nij->nj", g_w, Rj)
    J_extr = np.concatenate([
        g_wRj - g_c,
        -np.einsum("ni,nij->nj", g_wRj, skew(Rep)) + np.einsum("ni,nij->nj", g_c, skew(cpt - te)),
    ], axis=1)
    ev.lidar_J_target, ev.lidar_J_source, ev.lidar_J_extr = J_target, J_source, J_extr
    return ev


def residual_jacobians(prob: Problem):
    """Residuals and analytic Jacobians of every observation (see ``Evaluation``)."""
    return _evaluate(prob, jacobians=True)


# -- Levenberg-Marquardt -----------------------------------------------------

class _Layout:
    """Maps stations / extrinsic to columns of the reduced (non-landmark) system."""

    def __init__(self, n_stations, optimize_extrinsic):
        self.n = n_stations
        self.extr = 6 * (n_stations - 1) if optimize_extrinsic else -1
        self.size = 6 * (n_stations - 1) + (6 if optimize_extrinsic else 0)

    def pose_cols(self, s):
        return np.arange(6 * (s - 1), 6 * s) if s > 0 else np.full(6, -1)

    def extr_cols(self):
        return np.arange(self.extr, self.extr + 6) if self.extr >= 0 else np.full(6, -1)

    def block_names(self):
        names = []
        for s in range(1, self.n):
            names += [f"pose[{s}].translation"] * 3 + [f"pose[{s}].rotation"] * 3
        if self.extr >= 0:
            names += ["extrinsic.translation"] * 3 + ["extrinsic.rotation"] * 3
        return names


def _scatter(H, g, cols, J, r):
    keep = cols >= 0
    if not keep.any() or len(r) == 0:
        return
    Jk = J[:, keep]
    ck = cols[keep]
    H[np.ix_(ck, ck)] += Jk.T @ Jk
    g[ck] += Jk.T @ r


@dataclass
class _Normal:
    Hpp: np.ndarray
    gp: np.ndarray
    W: sp.csr_matrix
    Hll: np.ndarray   # (M, 3, 3)
    gl: np.ndarray    # (M, 3)
    active_landmarks: np.ndarray


def _robust_scale(norms, delta):
    if delta is None:
        return np.ones_like(norms)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(norms <= delta, 1.0, np.sqrt(delta / np.maximum(norms, 1e-300)))


def _build_normal(prob: Problem, ev: Evaluation, layout: _Layout, huber=None):
    P = layout.size
    M = len(prob.landmarks)
    Hpp = np.zeros((P, P))
    gp = np.zeros(P)

    c = prob.camera_obs
    sw = np.sqrt(c.weight * ev.cam_valid) * _robust_scale(np.linalg.norm(ev.cam_r, axis=1), huber)
    r_c = ev.cam_r * sw[:, None]
    Jp = ev.cam_J_pose * sw[:, None, None]
    Jl = ev.cam_J_land * sw[:, None, None]
    for s in np.unique(c.camera):
        if s == 0:
            continue
        rows = c.camera == s
        _scatter(Hpp, gp, layout.pose_cols(s), Jp[rows].reshape(-1, 6), r_c[rows].reshape(-1))

    Hll = np.zeros((M, 3, 3))
    gl = np.zeros((M, 3))
    np.add.at(Hll, c.landmark, np.einsum("nki,nkj->nij", Jl, Jl))
    np.add.at(gl, c.landmark, np.einsum("nki,nk->ni", Jl, r_c))
    active = np.zeros(M, dtype=bool)
    active[c.landmark[sw > 0]] = True

    # pose-landmark coupling, one 6x3 block per observation of a free pose
    free = c.camera > 0
    blocks = np.einsum("nki,nkj->nij", Jp[free], Jl[free])
    if len(blocks):
        row0 = 6 * (c.camera[free] - 1)
        col0 = 3 * c.landmark[free]
        rr = (row0[:, None, None] + np.arange(6)[None, :, None]) + np.zeros((1, 1, 3), dtype=np.int64)
        cc = (col0[:, None, None] + np.arange(3)[None, None, :]) + np.zeros((1, 6, 1), dtype=np.int64)
        W = sp.csr_matrix((blocks.ravel(), (rr.ravel(), cc.ravel())), shape=(P, 3 * M))
    else:
        W = sp.csr_matrix((P, 3 * M))

    lo = prob.lidar_obs
    if len(lo):
        swl = np.sqrt(lo.weight) * _robust_scale(np.abs(ev.lidar_r), huber)
        J_all = np.concatenate([ev.lidar_J_target, ev.lidar_J_source, ev.lidar_J_extr], axis=1) * swl[:, None]
        r_l = ev.lidar_r * swl
        key = lo.target * layout.n + lo.source
        order = np.argsort(key, kind="stable")
        keys, starts = np.unique(key[order], return_index=True)
        ends = np.append(starts[1:], len(order))
        ecols = layout.extr_cols()
        for kk, s0, s1 in zip(keys, starts, ends):
            rows = order[s0:s1]
            i, j = divmod(int(kk), layout.n)
            cols = np.concatenate([layout.pose_cols(i), layout.pose_cols(j), ecols])
            _scatter(Hpp, gp, cols, J_all[rows], r_l[rows])
    return _Normal(Hpp, gp, W, Hll, gl, active)


def _solve_step(ne: _Normal, lam, basis=None):
    """Damped Schur-complement solve of ``(H + lam D) delta = -g``.

    With ``basis`` (orthonormal columns) the pose/extrinsic step is restricted to its span.
    """
    Hpp = ne.Hpp.copy()
    dp = np.diag(Hpp).copy()
    floor_p = 1e-9 * max(dp.max(initial=0.0), 1e-12)
    Hpp[np.diag_indices_from(Hpp)] += lam * np.maximum(dp, floor_p)

    Hll = ne.Hll.copy()
    dl = np.einsum("nii->ni", Hll)
    floor_l = 1e-9 * max(dl.max(initial=0.0), 1e-12)
    idx = np.arange(3)
    Hll[:, idx, idx] += lam * np.maximum(dl, floor_l)
    Hll[~ne.active_landmarks] = np.eye(3)
    Hll_inv = np.linalg.inv(Hll)
    gl = np.where(ne.active_landmarks[:, None], ne.gl, 0.0)

    M = len(Hll)
    if M:
        WB = ne.W @ _block_diag(Hll_inv)
        S = Hpp - (WB @ ne.W.T).toarray()
        rhs = -ne.gp + WB @ gl.ravel()
    else:
        S, rhs, WB = Hpp, -ne.gp, None
    if basis is not None:
        S = basis.T @ S @ basis
        rhs = basis.T @ rhs
    if S.size:
        try:
            cf = scipy.linalg.cho_factor(S)
            dpose = scipy.linalg.cho_solve(cf, rhs)
        except np.linalg.LinAlgError:
            dpose = np.linalg.lstsq(S, rhs, rcond=None)[0]
        if basis is not None:
            dpose = basis @ dpose
    else:
        dpose = np.zeros(0)
    if M:
        tmp = -gl.ravel() - ne.W.T @ dpose
        dland = np.einsum("nij,nj->ni", Hll_inv, tmp.reshape(M, 3))
    else:
        dland = np.zeros((0, 3))
    return dpose, dland


def _block_diag(blocks):
    M = len(blocks)
    rows = (3 * np.arange(M)[:, None, None] + np.arange(3)[None, :, None]) + np.zeros((1, 1, 3), dtype=np.int64)
    cols = (3 * np.arange(M)[:, None, None] + np.arange(3)[None, None, :]) + np.zeros((1, 3, 1), dtype=np.int64)
    return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * M, 3 * M))


def _schur(ne: _Normal):
    """Undamped reduced matrix with landmarks eliminated."""
    Hll = ne.Hll.copy()
    Hll[~ne.active_landmarks] = np.eye(3)
    Hll_inv = np.linalg.pinv(Hll)
    if len(Hll):
        return ne.Hpp - (ne.W @ _block_diag(Hll_inv) @ ne.W.T).toarray()
    return ne.Hpp


def null_directions(ne: _Normal, layout: _Layout, tol=1e-9):
    """Numerical null space of the reduced system.

    Returns the names of the parameter blocks it touches and an orthonormal basis
    ``(P, k)`` of the null directions in parameter coordinates. Eigenvalues are
    taken after Jacobi scaling so that units do not matter.
    """
    S = _schur(ne)
    P = len(S)
    if P == 0:
        return [], np.zeros((0, 0))
    names = layout.block_names()
    d = np.diag(S).copy()
    scale = d.max(initial=0.0)
    flagged = set()
    vecs = []
    dead = d <= tol * max(scale, 1e-300)
    for k in np.nonzero(dead)[0]:
        flagged.add(names[k])
        vecs.append(np.eye(P)[k])
    live = np.nonzero(~dead)[0]
    if len(live):
        s = np.sqrt(d[live])
        Sn = S[np.ix_(live, live)] / np.outer(s, s)
        evals, evecs = np.linalg.eigh(Sn)
        top = max(evals[-1], 1e-300)
        for e, v in zip(evals, evecs.T):
            if e > tol * top:
                break
            v = v / s
            v = v / np.linalg.norm(v)
            for k, comp in zip(live, v):
                if abs(comp) > 0.3:
                    flagged.add(names[k])
            full = np.zeros(P)
            full[live] = v
            vecs.append(full)
    order = {name: idx for idx, name in enumerate(dict.fromkeys(names))}
    basis = np.linalg.qr(np.array(vecs).T)[0] if vecs else np.zeros((P, 0))
    return sorted(flagged, key=order.get), basis


def unconstrained_blocks(ne: _Normal, layout: _Layout, tol=1e-9):
    """Names of parameter blocks spanned by the numerical null space of the reduced system."""
    return null_directions(ne, layout, tol)[0]


def _apply_step(prob: Problem, layout: _Layout, dpose, dland):
    poses = list(prob.poses)
    for s in range(1, layout.n):
        poses[s] = poses[s].boxplus(dpose[6 * (s - 1): 6 * s])
    extr = prob.extrinsic.boxplus(dpose[layout.extr: layout.extr + 6]) if layout.extr >= 0 else prob.extrinsic
    return poses, prob.landmarks + dland, extr


def _robust_cost(prob, ev, huber):
    wc = prob.camera_obs.weight * ev.cam_valid
    wl = prob.lidar_obs.weight
    if huber is None:
        return 0.5 * float(np.sum(wc * np.sum(ev.cam_r ** 2, axis=1))) + 0.5 * float(np.sum(wl * ev.lidar_r ** 2))

    def rho(s):
        return np.where(s <= huber, s * s, 2 * huber * s - huber * huber)

    return 0.5 * float(np.sum(wc * rho(np.linalg.norm(ev.cam_r, axis=1)))) + 0.5 * float(
        np.sum(wl * rho(np.abs(ev.lidar_r))))


def optimize(prob: Problem, config: SolverConfig | None = None) -> SolveReport:
    """Levenberg-Marquardt over poses 1..N-1, landmarks and (optionally) the extrinsic.

    Modifies ``prob`` in place. Damping is multiplied by 10 on a rejected step and
    divided by 10 on an accepted one.
    """
    config = config or SolverConfig()
    # without LiDAR terms the extrinsic is not observed at all
    layout = _Layout(prob.num_stations, config.optimize_extrinsic and config.use_lidar)
    huber = config.huber
    ev = _evaluate(prob)
    cost = _robust_cost(prob, ev, huber)
    initial_cost = cost
    if not math.isfinite(cost):
        raise Diverged("initial cost is not finite")
    lam = config.lambda_init
    status = Status.MAX_ITERATIONS
    unconstrained = []
    basis = None
    iterations = 0
    for it in range(config.max_iterations):
        ne = _build_normal(prob, ev, layout, huber)
        if it == 0:
            unconstrained, null = null_directions(ne, layout, config.singular_tol)
            if unconstrained:
                if config.on_singular == "raise":
                    raise SingularNormalEquations(unconstrained)
                logger.warning("unconstrained parameter blocks: %s", ", ".join(unconstrained))
                # hold the state fixed along the null directions
                basis = scipy.linalg.null_space(null.T)
        grad = np.concatenate([ne.gp, ne.gl[ne.active_landmarks].ravel()])
        if cost == 0.0 or np.abs(grad).max(initial=0.0) < config.gradient_tol:
            status = Status.CONVERGED
            break
        iterations += 1
        accepted = False
        while lam < 1e16:
            dpose, dland = _solve_step(ne, lam, basis)
            if not (np.all(np.isfinite(dpose)) and np.all(np.isfinite(dland))):
                lam *= 10
                continue
            saved = (prob.poses, prob.landmarks, prob.extrinsic)
            prob.poses, prob.landmarks, prob.extrinsic = _apply_step(prob, layout, dpose, dland)
            new_ev = _evaluate(prob)
            new_cost = _robust_cost(prob, new_ev, huber)
            if math.isfinite(new_cost) and new_cost < cost:
                accepted = True
                lam = max(lam / 10, 1e-15)
                break
            prob.poses, prob.landmarks, prob.extrinsic = saved
            lam *= 10
        if not accepted:
            # no descent direction left at machine precision
            status = Status.CONVERGED
            break
        decrease = (cost - new_cost) / cost
        cost, ev = new_cost, new_ev
        step = max(np.abs(dpose).max(initial=0.0), np.abs(dland).max(initial=0.0))
        if decrease < config.cost_tol or step < config.step_tol:
            status = Status.CONVERGED
            break
    else:
        status = Status.MAX_ITERATIONS
    if not math.isfinite(cost):
        raise Diverged("cost became non-finite")
    return SolveReport(total_cost(prob), iterations, (0, 0), 0, status, initial_cost, unconstrained)


# -- outlier gating ----------------------------------------------------------

def observation_errors(prob: Problem):
    """Unweighted errors: (reprojection px, |range - d| m, |point-to-plane| m)."""
    ev = _evaluate(prob, jacobians=False)
    reproj = np.linalg.norm(ev.cam_r[:, :2], axis=1) * prob.sigma_pixel
    depth = np.abs(ev.cam_r[:, 2]) * prob.depth_sigmas()
    reproj[~ev.cam_valid] = np.inf
    depth[~ev.cam_valid] = np.inf
    lidar = np.abs(ev.lidar_r) * prob.sigma_lidar
    return reproj, depth, lidar


def _deletion_statistic(prob: Problem, rows):
    """Drop in landmark chi-square if each observation in ``rows`` were removed.

    Linearized leave-one-out with poses held fixed: ``r^T (I - J H^-1 J^T)^-1 r``.
    Unlike the raw residual it is not shrunk for observations with high leverage
    (for instance the most precise depth of a landmark).
    """
    ev = _evaluate(prob)
    c = prob.camera_obs
    active = (c.weight > 0) & ev.cam_valid
    J = ev.cam_J_land
    H = np.zeros((len(prob.landmarks), 3, 3))
    np.add.at(H, c.landmark[active], np.einsum("nki,nkj->nij", J[active], J[active]))
    Hinv = np.linalg.pinv(H[c.landmark[rows]])
    Jr = J[rows]
    S = np.eye(3) - np.einsum("nik,nkl,njl->nij", Jr, Hinv, Jr)
    r = ev.cam_r[rows]
    x = np.einsum("nij,nj->ni", np.linalg.pinv(S), r)
    return np.einsum("ni,ni->n", r, x)


def gate_outliers(prob: Problem, thresholds: Thresholds | None = None, relative=None):
    """Zero the weight of observations whose errors exceed the thresholds.

    With ``relative`` set, only observations whose threshold-normalized error also
    exceeds ``relative`` times the current worst are gated in this pass, and at
    most one camera observation per landmark.
    Weights never go back up. Returns ``(new camera outliers, new lidar outliers)``.
    """
    th = thresholds or Thresholds()
    reproj, depth, lidar = observation_errors(prob)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_c = np.maximum(np.where(reproj > th.reproj, reproj / max(th.reproj, 1e-300), 0.0),
                             np.where(depth > th.depth, depth / max(th.depth, 1e-300), 0.0))
        ratio_l = np.where(lidar > th.lidar, lidar / max(th.lidar, 1e-300), 0.0)
    cw, lw = prob.camera_obs.weight, prob.lidar_obs.weight
    over_c = (reproj > th.reproj) | (depth > th.depth)
    over_l = lidar > th.lidar
    if relative is not None:
        worst = max(ratio_c[cw > 0].max(initial=0.0), ratio_l[lw > 0].max(initial=0.0))
        cut = relative * worst
        over_l &= ratio_l >= cut
        # an outlier drags its landmark and with it the other observations: a
        # landmark with an observation past the cut gives up only the one whose
        # removal explains the most, among all its observations over threshold
        lm_all = prob.camera_obs.landmark
        flagged = np.unique(lm_all[over_c & (ratio_c >= cut) & (cw > 0)])
        cand = np.nonzero(over_c & (cw > 0) & np.isin(lm_all, flagged))[0]
        over_c[:] = False
        if len(cand):
            chi = _deletion_statistic(prob, cand)
            lm = lm_all[cand]
            order = np.lexsort((-chi, lm))
            first = np.ones(len(order), dtype=bool)
            first[1:] = lm[order][1:] != lm[order][:-1]
            over_c[cand[order[first]]] = True
    new_c = over_c & (cw > 0)
    new_l = over_l & (lw > 0)
    cw[new_c] = 0.0
    lw[new_l] = 0.0
    if len(cw) + len(lw) and not (cw > 0).any() and not (lw > 0).any():
        raise AllObservationsGated("every observation has been gated")
    return int(new_c.sum()), int(new_l.sum())


# -- outer loop --------------------------------------------------------------

def reassociate(prob: Problem, config: SolverConfig):
    """Recompute the LiDAR observations from the current pose and extrinsic estimates."""
    if prob.clouds is None or prob.lidar_adjacency is None:
        raise ConfigError("re-association needs clouds and a LiDAR adjacency matrix")
    ac = config.association
    if prob.keypoints is None or ac.resample:
        seed = ac.seed if prob.keypoints is None else np.random.SeedSequence([ac.seed, len(prob.lidar_obs)])
        prob.keypoints = default_keypoints(prob.clouds, ac.keypoints_per_cloud, seed)
    prob.lidar_obs = extract_lidar_observations(
        prob.clouds, prob.lidar_adjacency, prob.poses, prob.extrinsic, max_dist=ac.max_dist,
        keypoints=prob.keypoints, max_curvature=ac.max_curvature)


def solve_joint(prob: Problem, config: SolverConfig | None = None) -> SolveReport:
    """Optimize, gate, repeat until no new outliers; then re-extract LiDAR matches.

    ``config.reassociation_rounds`` counts re-extractions after the first pass,
    which uses the LiDAR observations already in ``prob``. Camera gates persist
    across rounds; LiDAR observations are fresh each round.
    """
    config = config or SolverConfig()
    prob.apply_config(config)
    relative = config.gating_fraction if config.gating == "progressive" else None
    total_iters = 0
    out_c = out_l = 0
    initial_cost = total_cost(prob)
    unconstrained = []
    status = Status.CONVERGED
    rounds = config.reassociation_rounds if config.use_lidar else 0
    for rnd in range(rounds + 1):
        if rnd > 0:
            reassociate(prob, config)
            out_l = 0
        if not config.use_lidar:
            prob.lidar_obs.weight[:] = 0.0
        for _ in range(config.max_gating_passes):
            rep = optimize(prob, config)
            total_iters += rep.iterations
            status = rep.status
            for name in rep.unconstrained:
                if name not in unconstrained:
                    unconstrained.append(name)
            nc, nl = gate_outliers(prob, config.thresholds, relative)
            out_c += nc
            out_l += nl
            logger.debug("round %d: cost %.6g, gated %d camera / %d lidar", rnd, rep.final_cost, nc, nl)
            if nc == 0 and nl == 0:
                break
        logger.info("round %d done: cost %.6g, %d lidar observations", rnd, total_cost(prob), len(prob.lidar_obs))
    return SolveReport(total_cost(prob), total_iters, (int((prob.camera_obs.weight == 0).sum()), out_l),
                       rounds, status, initial_cost, unconstrained)
