"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import time

import numpy as np
import pytest
from scipy.spatial import cKDTree

from lcfusion.correspond import PointCloud, estimate_normals
from lcfusion.evaluate import distance_map, icp_point_to_plane
from lcfusion.geometry import (CameraIntrinsics, Pose, compose, inverse, pose_distance, transform_point)
from lcfusion.graph import CameraObservations, LidarObservations
from lcfusion.mapping import DepthMap, fill_holes, lidar_support, project_lidar_depth, remove_outliers
from lcfusion.observability import check_uniqueness, motion_pairs, sweep_all, sweep_extrinsic
from lcfusion.pipeline import build_problem, truth_problem
from lcfusion.solver import Problem, SolverConfig, residual_jacobians, solve_joint, total_cost
from lcfusion.synth import (Noise, Outliers, Rect, SceneSpec, box, default_extrinsic, generate,
                            inject_lidar_outliers, look_at, offset_pose, render_depth, sample_surfaces,
                            truth_cloud)

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(pytestconfig):
    """``verdict(n, ok, detail)`` prints the criterion line past output capture."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def report(n, ok, detail):
        with capman.global_and_fixture_disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        return ok

    return report


def _start(gt, seed, pose_err=(0.1, np.radians(5)), te_err=(0.05, np.radians(3))):
    rng = np.random.default_rng(seed)
    poses0 = [Pose.identity()] + [offset_pose(p, *pose_err, rng) for p in gt.poses[1:]]
    return poses0, offset_pose(gt.extrinsic, *te_err, rng)


# -- 1 ------------------------------------------------------------------------------

def test_criterion_1_noise_free_exact_recovery(verdict):
    t0 = time.perf_counter()
    data = generate(SceneSpec(stations=5, landmarks=250, cloud_points=30000, seed=1))
    gt = data.truth
    cfg = SolverConfig()
    cfg.association.max_curvature = 1e-9
    assert cfg.association.keypoints_per_cloud >= 2000
    poses0, Te0 = _start(gt, 1)
    prob, _, _ = build_problem(data.feature_sets, data.clouds, data.cloud_transforms, gt.intrinsics, cfg, Te0,
                               initial_poses=poses0)
    rep = solve_joint(prob, cfg)
    elapsed = time.perf_counter() - t0
    errs = np.array([pose_distance(a, b) for a, b in zip(prob.poses, gt.poses)] +
                    [pose_distance(prob.extrinsic, gt.extrinsic)])
    ok = errs.max() < 1e-4 and rep.final_cost < 1e-12 and elapsed < 60
    verdict(1, ok, f"max pose/Te error {errs[:, 0].max():.2e} m / {errs[:, 1].max():.2e} rad, "
                   f"cost {rep.final_cost:.2e}, {elapsed:.1f} s (need < 1e-4, < 1e-12, < 60 s)")
    assert ok


# -- 2 ------------------------------------------------------------------------------

def test_criterion_2_noise_scaled_accuracy(verdict):
    res = []
    for seed in range(20):
        data = generate(SceneSpec(seed=seed, landmarks=250, cloud_points=30000, noise=Noise(1.0, 1.0, 0.01)))
        gt = data.truth
        cfg = SolverConfig(on_singular="warn")
        cfg.association.keypoints_per_cloud = 4000
        _, Te0 = _start(gt, seed)
        prob, _, _ = build_problem(data.feature_sets, data.clouds, data.cloud_transforms, gt.intrinsics, cfg, Te0)
        solve_joint(prob, cfg)
        res.append(pose_distance(prob.extrinsic, gt.extrinsic))
    med_t, med_r = np.median(np.array(res), axis=0)
    ok = med_t <= 0.005 and np.degrees(med_r) <= 0.3
    verdict(2, ok, f"median Te error {med_t * 1000:.2f} mm / {np.degrees(med_r):.3f} deg over 20 seeds "
                   f"(need <= 5 mm / 0.3 deg)")
    assert ok


# -- 3 ------------------------------------------------------------------------------

def test_criterion_3_fusion_beats_camera_only(verdict):
    fused, camera = [], []
    for seed in range(10):
        # the scene of criterion 2, but every landmark is seen from just two neighbouring stations
        spec = SceneSpec(seed=seed, landmarks=250, cloud_points=30000, observers_per_landmark=2,
                         camera_pairs=[(0, 1), (1, 2), (2, 3), (3, 4)], noise=Noise(1.0, 1.0, 0.01))
        data = generate(spec)
        gt = data.truth
        _, Te0 = _start(gt, seed)
        for use, sink in ((True, fused), (False, camera)):
            cfg = SolverConfig(use_lidar=use, on_singular="warn")
            cfg.association.keypoints_per_cloud = 4000
            prob, _, _ = build_problem(data.feature_sets, data.clouds, data.cloud_transforms, gt.intrinsics, cfg,
                                       Te0)
            solve_joint(prob, cfg)
            sink.append(np.median([pose_distance(a, b)[0] for a, b in zip(prob.poses[1:], gt.poses[1:])]))
    a, b = np.median(fused), np.median(camera)
    ok = a <= 0.5 * b
    verdict(3, ok, f"median pose error fused {a * 1000:.2f} mm vs camera-only {b * 1000:.2f} mm, "
                   f"ratio {a / b:.3f} (need <= 0.5)")
    assert ok


# -- 4 and 7 ------------------------------------------------------------------------

SCENARIOS = {
    "fixed rotation": dict(stations=3, generator="line"),
    "one-axis rotation": dict(stations=5, tilt=0.0),
    "two-axis rotation": dict(stations=5),
}


def _scenario(name):
    return generate(SceneSpec(noise=Noise(1.0, 1.0, 0.01), landmarks=150, **SCENARIOS[name]))


def test_criterion_4_observability(verdict):
    lines, ok = [], True
    for name in SCENARIOS:
        t0 = time.perf_counter()
        data = _scenario(name)
        cfg = SolverConfig(on_singular="warn")
        prob = truth_problem(data, cfg)
        if name == "two-axis rotation":
            # sweep around the optimum the solver actually reaches
            solve_joint(prob, cfg)
            sweeps = sweep_all(prob)
            good = all(s.increases_away_from_zero() and s.relative_rise() >= 0.01 for s in sweeps)
            detail = f"min rise {min(s.relative_rise() for s in sweeps):.3g}"
        else:
            dims = ("x", "y", "z") if name == "fixed rotation" else ("y",)
            sweeps = [sweep_extrinsic(prob, d) for d in dims]
            var = max(s.relative_variation() for s in sweeps)
            good = var < 1e-9
            detail = f"{'/'.join(dims)} variation {var:.2e}"
        elapsed = time.perf_counter() - t0
        good = good and elapsed < 30
        ok &= good
        lines.append(f"{name}: {detail}, {elapsed:.1f} s")
    verdict(4, ok, "; ".join(lines) + " (need flat < 1e-9, rise >= 1%, < 30 s each)")
    assert ok


def test_criterion_7_uniqueness_checker(verdict):
    got = []
    for name in SCENARIOS:
        gt = generate(SceneSpec(landmarks=20, cloud_points=0, **SCENARIOS[name])).truth
        got.append(check_uniqueness(motion_pairs(gt.poses, gt.extrinsic))["unique"])
    ok = got == [False, False, True]
    verdict(7, ok, f"unique flags {got} (need [False, False, True])")
    assert ok


# -- 5 ------------------------------------------------------------------------------

def test_criterion_5_outlier_gating(verdict):
    seed = 0
    spec = SceneSpec(seed=seed, landmarks=250, min_observers=3,
                     outliers=Outliers(feature_fraction=0.025, feature_pixels=30.0, depth_fraction=0.025,
                                       depth_offset=0.1, one_per_landmark=True))
    data = generate(spec)
    cfg = SolverConfig(reassociation_rounds=0)
    cfg.association.max_curvature = 1e-9
    prob = truth_problem(data, cfg)
    bad_l = inject_lidar_outliers(prob.lidar_obs, 0.05, 1.0, seed)
    bad_c = np.concatenate([o[lab >= 0] for o, lab in zip(data.truth.feature_outliers, data.truth.feature_labels)])
    solve_joint(prob, cfg)
    gated_c = prob.camera_obs.weight == 0
    gated_l = prob.lidar_obs.weight == 0
    caught = (gated_c[bad_c].sum() + gated_l[bad_l].sum()) / (bad_c.sum() + bad_l.sum())
    false = (gated_c[~bad_c].sum() + gated_l[~bad_l].sum()) / ((~bad_c).sum() + (~bad_l).sum())
    ok = caught >= 0.99 and false <= 0.01
    verdict(5, ok, f"{caught:.1%} of {bad_c.sum() + bad_l.sum()} outliers gated, {false:.2%} of inliers gated "
                   f"(camera {bad_c.mean():.1%}, lidar {bad_l.mean():.1%} injected; need >= 99%, <= 1%)")
    assert ok


# -- 6 ------------------------------------------------------------------------------

def _random_problem(rng):
    K = CameraIntrinsics(3000.0, 3000.0, 2000.0, 1500.0, 0.38)
    n, m = 3, 4
    poses = [Pose.identity()] + [Pose.from_rotvec(rng.normal(size=3) * 0.3, rng.normal(size=3) * 0.5)
                                 for _ in range(n - 1)]
    lms = rng.uniform(-1, 1, (m, 3)) + [0, 0, 6]
    cam = CameraObservations(np.repeat(np.arange(n), m), np.tile(np.arange(m), n),
                             rng.uniform(0, 4000, (n * m, 2)), rng.uniform(4, 8, n * m))
    nrm = rng.normal(size=(6, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    lid = LidarObservations([0, 0, 1, 0, 1, 0], [1, 2, 2, 1, 2, 2], rng.normal(size=(6, 3)),
                            rng.normal(size=(6, 3)), nrm)
    Te = Pose.from_rotvec(rng.normal(size=3), rng.normal(size=3))
    return Problem(poses, lms, Te, cam, lid, K)


def _fd_errors(prob, h=1e-6):
    """Worst relative error per residual type: feature, depth, lidar."""
    ev = residual_jacobians(prob)
    worst = np.zeros(3)

    def rel(a, b):
        return np.abs(a - b).max() / max(np.abs(b).max(), 1.0)

    def bump(setter, d):
        out = []
        for sgn in (1, -1):
            p = prob.copy()
            setter(p, sgn * d)
            e = residual_jacobians(p)
            out.append((e.cam_r.copy(), e.lidar_r.copy()))
        return [(a - b) / (2 * h) for a, b in zip(*out)]

    c, lo = prob.camera_obs, prob.lidar_obs
    for s in range(1, prob.num_stations):
        for d in range(6):
            delta = np.eye(6)[d] * h

            def set_pose(p, dl, s=s):
                p.poses[s] = prob.poses[s].boxplus(dl)

            cam_num, lid_num = bump(set_pose, delta)
            m = c.camera == s
            worst[0] = max(worst[0], rel(ev.cam_J_pose[m][:, :2, d], cam_num[m][:, :2]))
            worst[1] = max(worst[1], rel(ev.cam_J_pose[m][:, 2, d], cam_num[m][:, 2]))
            ana = np.where(lo.target == s, ev.lidar_J_target[:, d], 0) + np.where(
                lo.source == s, ev.lidar_J_source[:, d], 0)
            worst[2] = max(worst[2], rel(ana, lid_num))
    for d in range(6):
        def set_te(p, dl):
            p.extrinsic = prob.extrinsic.boxplus(dl)

        _, lid_num = bump(set_te, np.eye(6)[d] * h)
        worst[2] = max(worst[2], rel(ev.lidar_J_extr[:, d], lid_num))
    for k in range(len(prob.landmarks)):
        for d in range(3):
            def set_lm(p, dl, k=k, d=d):
                p.landmarks[k, d] += dl[0]

            cam_num, _ = bump(set_lm, np.array([h]))
            m = c.landmark == k
            worst[0] = max(worst[0], rel(ev.cam_J_land[m][:, :2, d], cam_num[m][:, :2]))
            worst[1] = max(worst[1], rel(ev.cam_J_land[m][:, 2, d], cam_num[m][:, 2]))
    return worst


def test_criterion_6_jacobians(verdict):
    rng = np.random.default_rng(6)
    worst = np.max([_fd_errors(_random_problem(rng)) for _ in range(100)], axis=0)
    ok = bool(np.all(worst < 1e-5))
    verdict(6, ok, f"worst relative error feature {worst[0]:.1e}, depth {worst[1]:.1e}, lidar {worst[2]:.1e} "
                   f"over 100 states (need < 1e-5)")
    assert ok


# -- 8 ------------------------------------------------------------------------------

def test_criterion_8_refinement(verdict):
    rng = np.random.default_rng(0)
    ex, ey, ez = np.eye(3)
    surf = [Rect([0, 0, 0], 2.5 * ex, 2.5 * ey),        # floor
            Rect([0, 2.5, 1.5], 1.5 * ez, 2.5 * ex),    # back wall
            Rect([2.5, 0, 1.5], 2.5 * ey, 1.5 * ez)]    # right wall
    K = CameraIntrinsics(300, 300, 160, 120, 0.38, 320, 240)
    cam = look_at([0.3, 0.3, 1.6], [2.1, 2.1, 0.5])
    Te = default_extrinsic()
    ztrue, which = render_depth(surf, cam, K)

    pts, _ = sample_surfaces(surf, 600000, rng)
    lid = transform_point(pts, inverse(compose(cam, Te)))
    lid = lid + lid / np.linalg.norm(lid, axis=1, keepdims=True) * rng.normal(0, 0.002, (len(lid), 1))
    cloud = estimate_normals(PointCloud(lid), 40)

    # stereo: 1 cm noise clipped at 3 sigma, 5% gross outliers, disc holes
    sig = 0.01
    st = ztrue + np.clip(rng.normal(0, sig, ztrue.shape), -3 * sig, 3 * sig)
    H, W = ztrue.shape
    out = rng.random(ztrue.shape) < 0.05
    st[out] += rng.choice([-1, 1], out.sum()) * rng.uniform(0.15, 0.5, out.sum())
    holes = np.zeros_like(out)
    rr, cc = np.indices(ztrue.shape)
    for _ in range(40):
        r0, c0 = rng.integers(0, H), rng.integers(0, W)
        rad = rng.uniform(3, 8)
        holes |= (rr - r0) ** 2 + (cc - c0) ** 2 <= rad ** 2
    st[holes] = np.nan
    out &= ~holes
    stereo = DepthMap(W, H, st)

    lidar = project_lidar_depth(cloud, cam, Te, K)
    sup = lidar_support(stereo, lidar, 3)
    r1 = remove_outliers(stereo, lidar, 0.05, 3)
    removed = stereo.valid & ~r1.valid
    frac_out = (removed & out & sup).sum() / (out & sup).sum()
    inl_removed = int((removed & ~out).sum())

    # labels: distance of each pixel's true surface point to the room creases, and the view angle
    d = np.column_stack([(cc.ravel() - K.cx) / K.fx, (rr.ravel() - K.cy) / K.fy, np.ones(H * W)]) * ztrue.ravel()[:, None]
    wp = transform_point(d, cam)
    dc = np.minimum.reduce([np.hypot(wp[:, 2], wp[:, 1] - 2.5), np.hypot(wp[:, 2], wp[:, 0] - 2.5),
                            np.hypot(wp[:, 0] - 2.5, wp[:, 1] - 2.5)]).reshape(H, W)
    nrm = np.array([s.normal for s in surf])[np.maximum(which, 0)]
    rays = (d / np.linalg.norm(d, axis=1, keepdims=True)).reshape(H, W, 3) @ cam.R.T
    view = np.degrees(np.arccos(np.abs(np.einsum("hwi,hwi->hw", nrm, rays))))
    r2 = fill_holes(r1, cloud, cam, Te, K, 0.01, np.radians(70), 3)
    filled = holes & r2.valid
    flat = holes & (dc > 0.10) & (view < 60)
    edge = holes & (dc < 0.01)
    frac_flat = (filled & flat).sum() / flat.sum()
    edge_filled = int((filled & edge).sum())
    ok = frac_out >= 0.95 and inl_removed == 0 and frac_flat >= 0.90 and edge_filled == 0
    verdict(8, ok, f"fold one removed {frac_out:.1%} of {(out & sup).sum()} supported outliers and {inl_removed} "
                   f"inliers; fold two filled {frac_flat:.1%} of {flat.sum()} flat hole pixels and {edge_filled} of "
                   f"{edge.sum()} edge pixels (need >= 95%, 0, >= 90%, 0)")
    assert ok


# -- 9 ------------------------------------------------------------------------------

def test_criterion_9_evaluation_oracle(verdict):
    rng = np.random.default_rng(9)
    truth = truth_cloud([Rect([0, 0, 0], [0.5, 0, 0], [0, 0.5, 0])], 20000, rng)
    sample = truth_cloud([Rect([0, 0, 0], [0.45, 0, 0], [0, 0.45, 0])], 5000, rng)
    rep = distance_map(PointCloud(sample.points + 0.003 * sample.normals), truth)
    mean_err = abs(rep.mean - 0.003)

    target = truth_cloud(box([0, 0, 0], [0.6, 0.4, 0.3]), 40000, rng)
    axis = rng.normal(size=3)
    T = Pose.from_rotvec(np.radians(1.0) * axis / np.linalg.norm(axis), 0.01 * np.array([0.6, -0.48, 0.64]))
    src = PointCloud(transform_point(target.points, inverse(T)))
    res = icp_point_to_plane(src, target)
    t, r = pose_distance(res.pose, T)
    ok = mean_err <= 1e-6 and t < 1e-5 and r < 1e-5
    verdict(9, ok, f"3 mm offset mean error {mean_err:.1e} m (need <= 1e-6); ICP residual "
                   f"{t:.1e} m / {r:.1e} rad after 1 cm / 1 deg (need < 1e-5)")
    assert ok


# -- 10 -----------------------------------------------------------------------------

def test_criterion_10_determinism(verdict, tmp_path):
    import yaml
    from lcfusion.cli import main

    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump({"stations": 4, "landmarks": 120, "cloud_points": 10000,
                                    "noise": {"pixel": 1.0, "depth_multiplier": 1.0, "range": 0.01}}))
    assert main(["synth", str(spec), "--out", str(tmp_path / "data"), "--seed", "5"]) == 0
    cfg = tmp_path / "data" / "config.json"
    for name in ("r1", "r2"):
        assert main(["--config", str(cfg), "--seed", "5", "solve", "--out", str(tmp_path / name)]) == 0
    files = ("poses.json", "extrinsic.json", "report.json")
    same = [(tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes() for f in files]
    ok = all(same)
    verdict(10, ok, f"byte-identical {dict(zip(files, same))}")
    assert ok
