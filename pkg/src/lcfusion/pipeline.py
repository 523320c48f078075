"""Glue between the stages: inputs -> Problem -> solved state."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .correspond import PointCloud, default_keypoints, estimate_normals, extract_lidar_observations
from .errors import DisconnectedGraph
from .geometry import CameraIntrinsics, Pose
from .graph import (CameraObservations, LidarObservations, adjacency_from_pairs, associate_features,
                    check_connected, initial_poses_from_cloud_transforms, merge_adjacency)
from .solver import Problem, SolverConfig

logger = logging.getLogger(__name__)


@dataclass
class MatchingConfig:
    similarity_threshold: float = 0.3
    ratio_threshold: float = 0.8
    cross_check: bool = False
    index: str = "brute"


def with_normals(clouds, k=20):
    return [c if c.has_normals and c.curvatures is not None else estimate_normals(c, k) for c in clouds]


def build_problem(feature_sets, clouds, cloud_transforms, intrinsics: CameraIntrinsics,
                  config: SolverConfig, initial_extrinsic: Pose, matching: MatchingConfig | None = None,
                  initial_poses=None):
    """Associate features, chain rough transforms into poses and extract the first LiDAR matches.

    Returns ``(problem, Ac, Al)``. Raises ``DisconnectedGraph`` when the merged
    pose graph has more than one component.
    """
    matching = matching or MatchingConfig()
    n = len(feature_sets)
    Al = adjacency_from_pairs(n, cloud_transforms.keys())
    poses = list(initial_poses) if initial_poses is not None else initial_poses_from_cloud_transforms(
        n, cloud_transforms, initial_extrinsic)
    cam_obs, landmarks, Ac = associate_features(
        feature_sets, matching.similarity_threshold, matching.ratio_threshold, intrinsics=intrinsics,
        poses=poses, cross_check=matching.cross_check, index=matching.index, depth_mode=config.depth_mode)
    connected, components = check_connected(merge_adjacency(Ac, Al))
    if not connected:
        raise DisconnectedGraph(components)
    clouds = with_normals(clouds, config.association.normal_k)
    ac = config.association
    keypoints = default_keypoints(clouds, ac.keypoints_per_cloud, ac.seed)
    lidar_obs = extract_lidar_observations(clouds, Al, poses, initial_extrinsic, max_dist=ac.max_dist,
                                           keypoints=keypoints, max_curvature=ac.max_curvature)
    prob = Problem(poses, landmarks, initial_extrinsic, cam_obs, lidar_obs, intrinsics,
                   clouds=clouds, lidar_adjacency=Al, keypoints=keypoints)
    prob.apply_config(config)
    logger.info("problem: %d stations, %d landmarks, %d camera / %d lidar observations",
                n, len(landmarks), len(cam_obs), len(lidar_obs))
    return prob, Ac, Al


def truth_problem(data, config: SolverConfig | None = None, camera_obs: CameraObservations | None = None,
                  poses=None, extrinsic=None, landmarks=None):
    """Problem from synthetic data with ground-truth correspondences.

    LiDAR observations are extracted at the true poses; the state defaults to the
    ground truth and can be overridden.
    """
    from .synth import truth_camera_observations

    config = config or SolverConfig()
    gt = data.truth
    clouds = with_normals(data.clouds, config.association.normal_k)
    Al = data.lidar_adjacency
    ac = config.association
    keypoints = default_keypoints(clouds, ac.keypoints_per_cloud, ac.seed)
    lidar_obs = extract_lidar_observations(clouds, Al, gt.poses, gt.extrinsic, max_dist=ac.max_dist,
                                           keypoints=keypoints, max_curvature=ac.max_curvature)
    cam = camera_obs if camera_obs is not None else truth_camera_observations(data)
    prob = Problem(list(poses) if poses is not None else list(gt.poses),
                   (landmarks if landmarks is not None else gt.landmarks).copy(),
                   extrinsic if extrinsic is not None else gt.extrinsic, cam, lidar_obs, gt.intrinsics,
                   clouds=clouds, lidar_adjacency=Al, keypoints=keypoints)
    prob.apply_config(config)
    return prob
