"""Extrinsic observability: hand-eye uniqueness conditions and cost sweeps."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, compose, inverse
from .solver import Problem, total_cost

DIMENSIONS = ("x", "y", "z", "roll", "pitch", "yaw")
# rotations are about camera axes: z is the optical axis, y points down
_DELTA_INDEX = {"x": 0, "y": 1, "z": 2, "pitch": 3, "yaw": 4, "roll": 5}
DEFAULT_HALF_RANGE = {"x": 0.05, "y": 0.05, "z": 0.05,
                      "roll": np.radians(2.0), "pitch": np.radians(2.0), "yaw": np.radians(2.0)}


@dataclass(frozen=True)
class MotionPair:
    """Relative camera motion ``Tc`` and the matching LiDAR motion ``Th``: Tc Te = Te Th."""

    Tc: Pose
    Th: Pose


def motion_pairs(poses, Te: Pose, pairs=None):
    """Motion pairs for station pairs ``(i, j)``; all ``i < j`` by default."""
    if pairs is None:
        pairs = itertools.combinations(range(len(poses)), 2)
    out = []
    Te_inv = inverse(Te)
    for i, j in pairs:
        Tc = compose(inverse(poses[i]), poses[j])
        out.append(MotionPair(Tc, compose(Te_inv, compose(Tc, Te))))
    return out


def motion_pairs_from_clouds(cloud_transforms, Te: Pose):
    """Motion pairs from LiDAR relative transforms ``{(i, j): M_ij}``."""
    Te_inv = inverse(Te)
    return [MotionPair(compose(Te, compose(M, Te_inv)), M) for _, M in sorted(cloud_transforms.items())]


def check_uniqueness(pairs, angle_tol=np.radians(1.0)):
    """Check the conditions under which the extrinsic is uniquely determined.

    Needs at least two motion pairs, with rotation angle above ``angle_tol``, whose
    camera rotation axes are not colinear (antiparallel axes count as colinear).
    Pairs that barely rotate carry no axis and are left out of the axis test.
    Returns ``{"unique": bool, "reasons": [...]}``.
    """
    pairs = list(pairs)
    reasons = []
    if len(pairs) < 2:
        reasons.append("fewer than 2 motion pairs")
    axes = []
    still = 0
    for mp in pairs:
        rv = mp.Tc.rotvec()
        angle = np.linalg.norm(rv)
        if angle > angle_tol:
            axes.append(rv / angle)
        else:
            still += 1
    if pairs and len(axes) < 2:
        if still:
            reasons.append(f"{still} of {len(pairs)} motion pairs have negligible rotation "
                           f"(<= {np.degrees(angle_tol):.3g} deg); fewer than 2 rotating pairs remain")
        else:
            reasons.append("fewer than 2 rotating motion pairs")
    if len(axes) >= 2:
        A = np.asarray(axes)
        cos = np.clip(np.abs(A @ A.T), 0.0, 1.0)
        spread = np.arccos(cos).max()
        if spread <= angle_tol:
            reasons.append(f"rotation axes are colinear (largest angle between axes "
                           f"{np.degrees(spread):.3g} deg)")
    return {"unique": not reasons, "reasons": reasons}


@dataclass
class SweepResult:
    dimension: str
    offsets: np.ndarray
    costs: np.ndarray

    @property
    def center_cost(self):
        return float(self.costs[len(self.costs) // 2])

    def relative_variation(self, eps=1e-300):
        return float((self.costs.max() - self.costs.min()) / max(self.center_cost, eps))

    def relative_rise(self, eps=1e-300):
        """Smaller of the two end-point increases over the centre, relative to the centre."""
        c0 = self.center_cost
        return float((min(self.costs[0], self.costs[-1]) - c0) / max(c0, eps))

    def increases_away_from_zero(self):
        mid = len(self.costs) // 2
        right = np.diff(self.costs[mid:])
        left = -np.diff(self.costs[:mid + 1])
        return bool(np.all(right > 0) and np.all(left > 0))


def perturb_extrinsic(Te: Pose, dimension, offset):
    """Translation offsets add to ``te``; rotations are about the camera axis, applied on the left."""
    delta = np.zeros(6)
    delta[_DELTA_INDEX[dimension]] = offset
    return Te.boxplus(delta)


def sweep_extrinsic(prob: Problem, dimension, half_range=None, steps=41):
    """Cost along one extrinsic dimension with every other parameter held fixed."""
    if dimension not in _DELTA_INDEX:
        raise ValueError(f"dimension must be one of {DIMENSIONS}, got {dimension!r}")
    if steps < 3 or steps % 2 == 0:
        raise ValueError("steps must be odd and >= 3 so the grid includes 0")
    if half_range is None:
        half_range = DEFAULT_HALF_RANGE[dimension]
    k = (steps - 1) // 2
    offsets = half_range * np.arange(-k, k + 1) / k
    Te = prob.extrinsic
    costs = np.empty(steps)
    try:
        for idx, off in enumerate(offsets):
            prob.extrinsic = Te if off == 0 else perturb_extrinsic(Te, dimension, off)
            costs[idx] = total_cost(prob)
    finally:
        prob.extrinsic = Te
    return SweepResult(dimension, offsets, costs)


def sweep_all(prob: Problem, half_ranges=None, steps=41):
    half_ranges = half_ranges or {}
    return [sweep_extrinsic(prob, d, half_ranges.get(d), steps) for d in DIMENSIONS]


def flatness_report(sweeps, rel_tol=1e-6, eps=1e-300):
    """``{dimension: "flat" | "constrained"}``."""
    return {s.dimension: "flat" if s.relative_variation(eps) < rel_tol else "constrained" for s in sweeps}


def write_sweep_csv(path, sweeps):
    if isinstance(sweeps, SweepResult):
        sweeps = [sweeps]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dimension", "offset", "cost"])
        for s in sweeps:
            for off, c in zip(s.offsets, s.costs):
                w.writerow([s.dimension, repr(float(off)), repr(float(c))])
