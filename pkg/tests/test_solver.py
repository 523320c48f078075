import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pose
from lcfusion.errors import AllObservationsGated, ConfigError, NonPositiveDepth, SingularNormalEquations
from lcfusion.geometry import CameraIntrinsics, Pose, compose, inverse, pose_distance, transform_point
from lcfusion.graph import CameraObservation, CameraObservations, LidarObservation, LidarObservations
from lcfusion.pipeline import truth_problem
from lcfusion.solver import (Problem, SolverConfig, Status, Thresholds, depth_sigma, gate_outliers, optimize,
                             residual_depth, residual_feature, residual_jacobians, residual_lidar, solve_joint,
                             total_cost)
from lcfusion.synth import Noise, SceneSpec, generate, inject_lidar_outliers, offset_pose

K = CameraIntrinsics(3000.0, 3000.0, 2000.0, 1500.0, 0.38)


def tiny_problem(landmark=(0.0, 0.0, 5.0), pixel=(2000.0, 1500.0), depth=5.0):
    cam = CameraObservations([0, 1], [0, 0], [pixel, pixel], [depth, depth])
    return Problem([Pose.identity(), Pose.identity()], [landmark], Pose.identity(), cam, None, K)


def noisy_config(**kw):
    cfg = SolverConfig(**kw)
    cfg.association.keypoints_per_cloud = 500
    return cfg


def noise_free_config(**kw):
    cfg = SolverConfig(**kw)
    cfg.association.max_curvature = 1e-9
    cfg.association.keypoints_per_cloud = 500
    return cfg


@pytest.fixture(scope="module")
def clean_scene():
    return generate(SceneSpec(stations=3, landmarks=60, cloud_points=8000, seed=11))


# -- residuals -----------------------------------------------------------------

def test_feature_residual_examples():
    prob = tiny_problem()
    o = prob.camera_obs[0]
    assert np.allclose(residual_feature(o, prob), [0, 0])
    prob.camera_obs.pixel[0] = [1999.0, 1500.0]
    assert np.allclose(residual_feature(prob.camera_obs[0], prob), [1, 0])


def test_depth_sigma_example():
    # d = 5 m, b = 0.38 m, f = 3000 px, sigma_p = 1
    assert depth_sigma(5.0, K, 1.0) == pytest.approx(25 / 1140)
    prob = tiny_problem(depth=5.0)
    prob.landmarks[0] = [0, 0, 5.0 + 25 / 1140]
    assert residual_depth(prob.camera_obs[0], prob) == pytest.approx(1.0)
    prob.landmarks[0] = [0, 0, 5.0]
    assert residual_depth(prob.camera_obs[0], prob) == pytest.approx(0.0)


@given(st.floats(0.1, 50), st.floats(0.1, 5))
def test_depth_sigma_doubling_quadruples(d, sp):
    assert depth_sigma(2 * d, K, sp) == pytest.approx(4 * depth_sigma(d, K, sp), rel=1e-12)


def test_landmark_behind_camera():
    prob = tiny_problem(landmark=(0, 0, -5.0))
    with pytest.raises(NonPositiveDepth):
        residual_depth(prob.camera_obs[0], prob)
    # the vectorised path drops it from the cost instead
    assert total_cost(prob) == 0.0


def lidar_problem(p, q, n, Te=Pose.identity()):
    lo = LidarObservations([0], [1], [p], [q], [n])
    return Problem([Pose.identity(), Pose.identity()], np.zeros((0, 3)), Te, None, lo, K)


def test_lidar_residual_examples():
    n = np.array([0, 0, 1.0])
    assert residual_lidar(lidar_problem([0, 0, 1], [0, 0, 1], n).lidar_obs[0],
                          lidar_problem([0, 0, 1], [0, 0, 1], n)) == 0.0
    prob = lidar_problem([0, 0, 1.02], [0, 0, 1], n)
    assert residual_lidar(prob.lidar_obs[0], prob) == pytest.approx(0.02 / 0.05)
    prob = lidar_problem([0.3, -0.2, 1], [0, 0, 1], n)
    assert residual_lidar(prob.lidar_obs[0], prob) == pytest.approx(0.0, abs=1e-15)


def test_total_cost_zero_cases(clean_scene):
    prob = tiny_problem()
    assert total_cost(prob) == 0.0
    prob.camera_obs.pixel[:] = [10, 10]
    prob.camera_obs.weight[:] = 0.0
    assert total_cost(prob) == 0.0
    prob = truth_problem(clean_scene, noise_free_config())
    n_res = 3 * len(prob.camera_obs) + len(prob.lidar_obs)
    assert total_cost(prob) < 1e-16 * n_res


def test_total_cost_is_half_sum_of_squares(clean_scene):
    data = generate(SceneSpec(stations=3, landmarks=40, cloud_points=5000, seed=2, noise=Noise(1, 1, 0.01)))
    prob = truth_problem(data, noisy_config())
    assert len(prob.lidar_obs) > 100
    ref = 0.0
    for o in prob.camera_obs:
        ref += o.weight * (np.sum(residual_feature(o, prob) ** 2) + residual_depth(o, prob) ** 2)
    for o in prob.lidar_obs:
        ref += o.weight * residual_lidar(o, prob) ** 2
    assert total_cost(prob) == pytest.approx(0.5 * ref, rel=1e-10)


def test_vectorised_residuals_match_reference_path():
    data = generate(SceneSpec(stations=3, landmarks=30, cloud_points=4000, seed=8, noise=Noise(1, 1, 0.01)))
    prob = truth_problem(data, noisy_config())
    assert len(prob.lidar_obs) > 100
    rng = np.random.default_rng(0)
    prob.poses = [prob.poses[0]] + [offset_pose(p, 0.01, 0.01, rng) for p in prob.poses[1:]]
    prob.extrinsic = offset_pose(prob.extrinsic, 0.01, 0.01, rng)
    ev = residual_jacobians(prob)
    for k, o in enumerate(prob.camera_obs):
        assert np.allclose(ev.cam_r[k, :2], residual_feature(o, prob), atol=1e-9)
        assert ev.cam_r[k, 2] == pytest.approx(residual_depth(o, prob), abs=1e-9)
    for k, o in enumerate(prob.lidar_obs):
        assert ev.lidar_r[k] == pytest.approx(residual_lidar(o, prob), abs=1e-9)


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.sampled_from(["range", "z"]))
def test_jacobians_match_central_differences(seed, depth_mode):
    rng = np.random.default_rng(seed)
    n = 3
    poses = [Pose.identity()] + [random_pose(rng, 0.5, 0.5) for _ in range(n - 1)]
    lms = rng.uniform(-1, 1, (4, 3)) + [0, 0, 6]
    cam = CameraObservations(np.repeat(np.arange(n), 4), np.tile(np.arange(4), n),
                             rng.uniform(0, 4000, (4 * n, 2)), rng.uniform(4, 8, 4 * n))
    nrm = rng.normal(size=(6, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    lid = LidarObservations([0, 0, 1, 0, 1, 0], [1, 2, 2, 1, 2, 2], rng.normal(size=(6, 3)),
                            rng.normal(size=(6, 3)), nrm)
    prob = Problem(poses, lms, random_pose(rng), cam, lid, K, depth_mode=depth_mode)
    _check_fd(prob)


def _check_fd(prob, h=1e-6, rtol=1e-5):
    ev = residual_jacobians(prob)

    def stack(p):
        e = residual_jacobians(p)
        return e.cam_r.copy(), e.lidar_r.copy()

    def rel(a, b):
        return np.abs(a - b).max() / max(np.abs(b).max(), 1.0)

    c, lo = prob.camera_obs, prob.lidar_obs
    for s in range(1, prob.num_stations):
        for d in range(6):
            delta = np.zeros(6)
            delta[d] = h
            plus, minus = prob.copy(), prob.copy()
            plus.poses[s] = prob.poses[s].boxplus(delta)
            minus.poses[s] = prob.poses[s].boxplus(-delta)
            (cp, lp), (cm, lm) = stack(plus), stack(minus)
            m = c.camera == s
            assert rel(ev.cam_J_pose[m][:, :, d], ((cp - cm) / (2 * h))[m]) < rtol
            num = (lp - lm) / (2 * h)
            ana = np.where(lo.target == s, ev.lidar_J_target[:, d], 0) + np.where(
                lo.source == s, ev.lidar_J_source[:, d], 0)
            assert rel(ana, num) < rtol
    for d in range(6):
        delta = np.zeros(6)
        delta[d] = h
        plus, minus = prob.copy(), prob.copy()
        plus.extrinsic = prob.extrinsic.boxplus(delta)
        minus.extrinsic = prob.extrinsic.boxplus(-delta)
        assert rel(ev.lidar_J_extr[:, d], (stack(plus)[1] - stack(minus)[1]) / (2 * h)) < rtol
    for k in range(len(prob.landmarks)):
        for d in range(3):
            plus, minus = prob.copy(), prob.copy()
            plus.landmarks[k, d] += h
            minus.landmarks[k, d] -= h
            m = c.landmark == k
            num = ((stack(plus)[0] - stack(minus)[0]) / (2 * h))[m]
            assert rel(ev.cam_J_land[m][:, :, d], num) < rtol


# -- optimization ----------------------------------------------------------------

def test_start_at_ground_truth_is_a_fixed_point(clean_scene):
    prob = truth_problem(clean_scene, noise_free_config())
    c0 = total_cost(prob)
    rep = optimize(prob, noise_free_config())
    assert rep.iterations <= 2
    assert abs(rep.final_cost - c0) < 1e-12


def test_recovers_perturbed_poses_exactly(clean_scene):
    gt = clean_scene.truth
    rng = np.random.default_rng(0)
    start = [Pose.identity()] + [offset_pose(p, 0.05, np.radians(2), rng) for p in gt.poses[1:]]
    prob = truth_problem(clean_scene, noise_free_config(), poses=start)
    rep = optimize(prob, noise_free_config())
    assert rep.status == Status.CONVERGED
    for est, true in zip(prob.poses, gt.poses):
        t, r = pose_distance(est, true)
        assert t < 1e-6 and r < 1e-6
    t, r = pose_distance(prob.extrinsic, gt.extrinsic)
    assert t < 1e-6 and r < 1e-6


def test_cost_never_increases_across_iterations(clean_scene):
    gt = clean_scene.truth
    rng = np.random.default_rng(1)
    start = [Pose.identity()] + [offset_pose(p, 0.05, np.radians(2), rng) for p in gt.poses[1:]]
    costs = []
    for k in range(1, 8):
        prob = truth_problem(clean_scene, noise_free_config(), poses=start)
        costs.append(optimize(prob, noise_free_config(max_iterations=k)).final_cost)
    assert np.all(np.diff(costs) <= 0)


def test_fixed_rotation_scene_is_singular_in_extrinsic_translation():
    data = generate(SceneSpec(stations=3, generator="line", landmarks=60, cloud_points=8000, seed=3))
    prob = truth_problem(data, noise_free_config())
    with pytest.raises(SingularNormalEquations) as err:
        optimize(prob, noise_free_config())
    assert "extrinsic.translation" in err.value.blocks
    prob = truth_problem(data, noise_free_config())
    rep = optimize(prob, noise_free_config(on_singular="warn"))
    assert "extrinsic.translation" in rep.unconstrained


def test_gauge_invariance():
    base = generate(SceneSpec(stations=3, landmarks=60, cloud_points=6000, seed=9)).truth
    shift = Pose.from_rotvec([0.1, -0.2, 0.3], [0.5, 0.2, -0.1])
    costs = []
    for S in (Pose.identity(), shift):
        # the whole world moves rigidly before synthesis; the gauge removes it again
        spec = SceneSpec(stations=3, generator="custom", custom_poses=[compose(S, p) for p in base.poses],
                         surfaces=[f.transformed(S).to_dict() for f in base.surfaces], landmarks=60, cloud_points=6000,
                         seed=9, noise=Noise(1, 1, 0.01))
        cfg = noisy_config(reassociation_rounds=0)
        prob = truth_problem(generate(spec), cfg)
        costs.append(solve_joint(prob, cfg).final_cost)
    assert costs[0] == pytest.approx(costs[1], rel=1e-9)


def test_scale_is_fixed_by_depth(clean_scene):
    gt = clean_scene.truth
    start = [Pose.identity()] + [Pose(p.rotation, 1.05 * p.translation) for p in gt.poses[1:]]
    prob = truth_problem(clean_scene, noise_free_config(), poses=start, landmarks=1.05 * gt.landmarks)
    optimize(prob, noise_free_config())
    for est, true in zip(prob.poses, gt.poses):
        assert pose_distance(est, true)[0] < 1e-6


# -- gating ----------------------------------------------------------------------

def test_gate_nothing_when_all_residuals_small(clean_scene):
    prob = truth_problem(clean_scene, noise_free_config())
    assert gate_outliers(prob) == (0, 0)


def test_single_ten_pixel_outlier_is_gated_exactly(clean_scene):
    prob = truth_problem(clean_scene, noise_free_config())
    counts = np.bincount(prob.camera_obs.landmark)
    k = int(np.nonzero(prob.camera_obs.landmark == np.argmax(counts))[0][0])
    prob.camera_obs.pixel[k] += [10.0, 0.0]
    assert gate_outliers(prob, Thresholds(reproj=3.0)) == (1, 0)
    assert prob.camera_obs.weight[k] == 0.0
    assert (prob.camera_obs.weight == 0).sum() == 1


def test_zero_threshold_gates_every_nonzero_error():
    data = generate(SceneSpec(stations=3, landmarks=40, cloud_points=5000, seed=2, noise=Noise(1, 1, 0.01)))
    prob = truth_problem(data, noisy_config())
    with pytest.raises(AllObservationsGated):
        gate_outliers(prob, Thresholds(0.0, 0.0, 0.0))
    assert not (prob.camera_obs.weight > 0).any()
    ev = residual_jacobians(prob)
    assert np.all((prob.lidar_obs.weight == 0) | (ev.lidar_r == 0))


def test_gates_never_reopen(clean_scene):
    prob = truth_problem(clean_scene, noise_free_config())
    prob.camera_obs.pixel[:5] += 20
    cfg = noise_free_config()
    optimize(prob, cfg)
    gate_outliers(prob, cfg.thresholds)
    before = prob.camera_obs.weight.copy()
    prob.camera_obs.pixel[:5] -= 20
    gate_outliers(prob, cfg.thresholds)
    assert np.array_equal(prob.camera_obs.weight, before)


def test_zero_rounds_equals_optimize_plus_gating(clean_scene):
    cfg = noise_free_config(reassociation_rounds=0)
    a = truth_problem(clean_scene, cfg)
    a.camera_obs.pixel[0] += 15
    b = a.copy()
    rep = solve_joint(a, cfg)
    while True:
        optimize(b, cfg)
        if gate_outliers(b, cfg.thresholds, cfg.gating_fraction) == (0, 0):
            break
    assert rep.reassociation_rounds == 0
    assert np.array_equal(a.camera_obs.weight, b.camera_obs.weight)
    assert rep.final_cost == pytest.approx(total_cost(b), rel=1e-12, abs=1e-18)


def test_lidar_outliers_flagged_and_extrinsic_near_noise_floor():
    data = generate(SceneSpec(stations=4, landmarks=120, cloud_points=15000, seed=4, noise=Noise(1, 1, 0.01)))
    cfg = SolverConfig(reassociation_rounds=0)
    ref = truth_problem(data, cfg)
    solve_joint(ref, cfg)
    floor = pose_distance(ref.extrinsic, data.truth.extrinsic)[0]
    prob = truth_problem(data, cfg)
    bad = inject_lidar_outliers(prob.lidar_obs, 0.05, 1.0, seed=0)
    solve_joint(prob, cfg)
    assert np.all(prob.lidar_obs.weight[bad] == 0)
    assert pose_distance(prob.extrinsic, data.truth.extrinsic)[0] <= 2 * max(floor, 1e-4)


def test_use_lidar_false_is_camera_only(clean_scene):
    cfg = noise_free_config(use_lidar=False)
    prob = truth_problem(clean_scene, cfg)
    Te = prob.extrinsic
    rep = solve_joint(prob, cfg)
    assert np.all(prob.lidar_obs.weight == 0)
    assert prob.extrinsic is Te
    assert rep.reassociation_rounds == 0


# -- configuration ---------------------------------------------------------------

def test_solver_config_round_trip_and_validation():
    cfg = SolverConfig(initial_extrinsic=Pose.from_rotvec([0, 0, 0.1], [1, 2, 3]), gating="threshold")
    back = SolverConfig.from_dict(cfg.to_dict())
    assert back.gating == "threshold" and np.allclose(back.initial_extrinsic.as_vector(),
                                                      cfg.initial_extrinsic.as_vector())
    for bad in ({"depth_mode": "disparity"}, {"gating": "x"}, {"on_singular": "ignore"}, {"bogus": 1},
                {"sigmas": {"pixel": 0}}):
        with pytest.raises(ConfigError):
            SolverConfig.from_dict(bad)


def test_problem_rejects_bad_gauge_and_ids():
    with pytest.raises(ValueError):
        Problem([Pose.from_rotvec([0, 0, 0.1])], np.zeros((0, 3)), Pose.identity(), None, None, K)
    cam = CameraObservations([0], [3], [[0, 0]], [1.0])
    with pytest.raises(ValueError):
        Problem([Pose.identity()], np.zeros((1, 3)), Pose.identity(), cam, None, K)


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-np.pi, np.pi))
def test_tangential_cloud_motion_costs_nothing(dx, dy, yaw):
    # planar patch z = 4 in camera 0; station 1 slides and spins within the plane
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(-1, 1, (50, 2)), np.full(50, 4.0)])
    T1 = Pose.from_rotvec([0, 0, yaw], [dx, dy, 0])
    lo = LidarObservations(np.zeros(50, int), np.ones(50, int), transform_point(pts, inverse(T1)), pts,
                           np.tile([0, 0, 1.0], (50, 1)))
    prob = Problem([Pose.identity(), T1], np.zeros((0, 3)), Pose.identity(), None, lo, K)
    assert total_cost(prob) < 1e-25
    prob.poses[1] = Pose.identity()
    assert total_cost(prob) == pytest.approx(0.0, abs=1e-20)
