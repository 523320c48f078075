"""Model accuracy: point-to-plane ICP refinement and distance statistics against a truth cloud."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .correspond import PointCloud
from .errors import EmptyInput, MissingNormals, NoCorrespondences, NotConverged
from .geometry import Pose, compose, transform_point
from .io import dump_json

logger = logging.getLogger(__name__)


@dataclass
class IcpResult:
    pose: Pose
    converged: bool
    iterations: int
    rmse: float
    inliers: int


def _target_normals(target: PointCloud):
    if target.normals is None:
        raise MissingNormals("point-to-plane ICP needs target normals")
    return target.valid


def icp_point_to_plane(source: PointCloud, target: PointCloud, init: Pose | None = None, max_iters=50,
                       tol=1e-10, max_corr_dist=0.1, strict=False) -> IcpResult:
    """Source-to-target transform minimising sum (n^T (R p + t - q))^2.

    Each iteration pairs every source point with its nearest target point
    (with a valid normal) within ``max_corr_dist``, solves the linearised
    problem and applies the update on the left. Stops when the update is below
    ``tol``. If ``max_iters`` runs out the best-so-far pose comes back with
    ``converged=False``; ``strict=True`` raises NotConverged instead.
    """
    src = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=float).reshape(-1, 3)
    ok = _target_normals(target)
    tpts, tnrm = target.points[ok], target.normals[ok]
    if len(src) == 0 or len(tpts) == 0:
        raise NoCorrespondences("empty source or target")
    tree = cKDTree(tpts)
    T = Pose.identity() if init is None else init
    best = None
    for it in range(1, max_iters + 1):
        p = transform_point(src, T).reshape(-1, 3)
        dist, idx = tree.query(p, distance_upper_bound=max_corr_dist)
        hit = np.isfinite(dist)
        if hit.sum() < 6:
            if best is not None:
                break
            raise NoCorrespondences(f"only {int(hit.sum())} source points within {max_corr_dist} m of the target")
        p, q, n = p[hit], tpts[idx[hit]], tnrm[idx[hit]]
        r = np.einsum("ij,ij->i", n, p - q)
        rmse = float(np.sqrt(np.mean(r ** 2)))
        if best is None or rmse <= best[1]:
            best = (T, rmse, int(hit.sum()))
        J = np.hstack([np.cross(p, n), n])
        delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
        # delta = (omega, dt): p -> Exp(omega) p + dt
        T = compose(Pose.from_rotvec(delta[:3], delta[3:]), T)
        if np.linalg.norm(delta) < tol:
            p = transform_point(src, T).reshape(-1, 3)
            dist, idx = tree.query(p, distance_upper_bound=max_corr_dist)
            hit = np.isfinite(dist)
            r = np.einsum("ij,ij->i", tnrm[idx[hit]], p[hit] - tpts[idx[hit]])
            return IcpResult(T, True, it, float(np.sqrt(np.mean(r ** 2))), int(hit.sum()))
    if strict:
        raise NotConverged(f"ICP did not converge in {max_iters} iterations")
    logger.warning("ICP stopped after %d iterations without converging", max_iters)
    return IcpResult(best[0], False, max_iters, best[1], best[2])


@dataclass
class DistanceReport:
    mean: float
    median: float
    edges: np.ndarray
    counts: np.ndarray
    count: int
    excluded: int = 0
    density: float = float("nan")  # model points per cm^2
    signed: bool = False
    distances: np.ndarray = field(default=None, repr=False)

    @property
    def histogram(self):
        return self.edges, self.counts

    def to_json(self):
        return {"mean": self.mean, "median": self.median, "count": self.count, "excluded": self.excluded,
                "density_per_cm2": self.density, "signed": self.signed,
                "bin_edges": [float(e) for e in self.edges], "counts": [int(c) for c in self.counts]}

    def save(self, json_path=None, csv_path=None):
        if json_path is not None:
            dump_json(json_path, self.to_json())
        if csv_path is not None:
            write_histogram_csv(csv_path, self)


def surface_density(points, k=8):
    """Mean local density in points per cm^2 from the k-nearest-neighbour disc."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) <= k:
        return float("nan")
    d, _ = cKDTree(points).query(points, k=k + 1)
    r = d[:, -1]
    r = r[r > 0]
    if not len(r):
        return float("nan")
    return float(np.mean(k / (np.pi * (r * 100.0) ** 2)))


def distance_map(model: PointCloud, truth: PointCloud, max_dist=0.02, bins=100, signed=False) -> DistanceReport:
    """Point-to-plane distance of each model point to its nearest truth point's tangent plane.

    Model points whose nearest truth point is farther than ``max_dist`` are
    excluded. The histogram spans ``[0, max_dist]`` (``[-max_dist, max_dist]``
    when signed).
    """
    pts = model.points if isinstance(model, PointCloud) else np.asarray(model, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("model cloud is empty")
    ok = _target_normals(truth)
    if not ok.any():
        raise EmptyInput("truth cloud has no usable normals")
    tpts, tnrm = truth.points[ok], truth.normals[ok]
    dist, idx = cKDTree(tpts).query(pts, distance_upper_bound=max_dist)
    hit = np.isfinite(dist)
    if not hit.any():
        raise EmptyInput(f"no model point lies within {max_dist} m of the truth cloud")
    d = np.einsum("ij,ij->i", tnrm[idx[hit]], pts[hit] - tpts[idx[hit]])
    if not signed:
        d = np.abs(d)
    lo = -max_dist if signed else 0.0
    counts, edges = np.histogram(np.clip(d, lo, max_dist), bins=bins, range=(lo, max_dist))
    return DistanceReport(float(d.mean()), float(np.median(d)), edges, counts, int(hit.sum()),
                          int((~hit).sum()), surface_density(pts[hit]), signed, d)


def write_histogram_csv(path, report: DistanceReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(report.edges[:-1], report.edges[1:], report.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
