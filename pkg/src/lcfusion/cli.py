"""Command-line entry point: synth, solve, probe, refine and eval over files.

Exit codes: 0 ok, 1 configuration, 2 I/O or format, 3 association, 4 solver,
5 evaluation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, FormatError, FusionError

logger = logging.getLogger("lcfusion")

_PATH_KEYS = ("data", "features", "clouds", "rough_transforms", "intrinsics", "initial_extrinsic", "truth",
              "state", "depth_maps", "model", "truth_cloud")


def _load_mapping(path):
    """YAML or JSON file into a dict (JSON is valid YAML, but keep the error messages apart)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            import yaml
            data = yaml.safe_load(text)
    except Exception as exc:  # yaml and json raise unrelated types
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


@dataclass
class RefineSettings:
    max_diff: float = 0.05
    radius: float = 3.0
    max_curvature: float = 0.01
    max_view_angle_deg: float = 70.0
    normal_k: int = 20
    voxel_leaf: float | None = None
    # "nearest" LiDAR pixel, or "any" LiDAR pixel in the radius agreeing (kinder to sparse clouds)
    reference: str = "nearest"


@dataclass
class SweepSettings:
    steps: int = 41
    translation: float = 0.05
    rotation_deg: float = 2.0
    rel_tol: float = 1e-6


@dataclass
class EvalSettings:
    max_dist: float = 0.02
    bins: int = 100
    signed: bool = False
    icp: bool = False
    icp_max_corr_dist: float = 0.05
    normal_k: int = 20


@dataclass
class RunConfig:
    paths: dict = field(default_factory=dict)
    solver: object = None
    matching: object = None
    refine: RefineSettings = field(default_factory=RefineSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    evaluate: EvalSettings = field(default_factory=EvalSettings)
    seed: int = 0

    @property
    def output(self):
        return Path(self.paths.get("output", "."))

    def path(self, key, default=None):
        v = self.paths.get(key)
        return Path(v) if v is not None else default

    @classmethod
    def from_dict(cls, d, base_dir=".", seed=None):
        from .pipeline import MatchingConfig
        from .solver import SolverConfig

        d = dict(d or {})
        known = {"paths", "solver", "matching", "refine", "sweep", "evaluate", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = Path(base_dir)
        paths = {}
        for key, value in (d.get("paths") or {}).items():
            if key not in _PATH_KEYS and key != "output":
                raise ConfigError(f"paths.{key}: unknown path key")
            paths[key] = str(value if Path(value).is_absolute() else base / value)
        for key, value in paths.items():
            if key != "output" and not Path(value).exists():
                raise ConfigError(f"paths.{key}: {value} does not exist")

        def section(kind, name):
            try:
                return kind(**(d.get(name) or {}))
            except TypeError as exc:
                raise ConfigError(f"{name}: {exc}") from exc

        solver_d = dict(d.get("solver") or {})
        # the command line has no one to answer a singularity, so report and carry on
        solver_d.setdefault("on_singular", "warn")
        solver = SolverConfig.from_dict(solver_d)
        cfg = cls(paths, solver, section(MatchingConfig, "matching"), section(RefineSettings, "refine"),
                  section(SweepSettings, "sweep"), section(EvalSettings, "evaluate"),
                  int(d.get("seed", 0) if seed is None else seed))
        if cfg.sweep.steps < 3 or cfg.sweep.steps % 2 == 0:
            raise ConfigError("sweep.steps must be odd and >= 3")
        if cfg.refine.reference not in ("nearest", "any"):
            raise ConfigError("refine.reference must be 'nearest' or 'any'")
        if cfg.evaluate.bins < 1 or cfg.evaluate.max_dist <= 0:
            raise ConfigError("evaluate.bins must be >= 1 and evaluate.max_dist > 0")
        # every random choice downstream is seeded from here
        cfg.solver.association.seed = cfg.seed
        return cfg


def load_run_config(path=None, seed=None, output=None) -> RunConfig:
    if path is None:
        data, base = {}, Path(".")
    else:
        data, base = _load_mapping(path), Path(path).parent
    cfg = RunConfig.from_dict(data, base, seed)
    if output is not None:
        cfg.paths["output"] = str(output)
    return cfg


# -- inputs ------------------------------------------------------------------

def _data_file(cfg: RunConfig, key, name):
    p = cfg.path(key)
    if p is None and cfg.path("data") is not None:
        p = cfg.path("data") / name
    if p is None:
        raise ConfigError(f"paths.{key} (or paths.data) is required")
    if not p.exists():
        raise FormatError(f"{p} not found")
    return p


def _listed(cfg: RunConfig, key, pattern):
    v = cfg.paths.get(key)
    root = Path(v) if v is not None else cfg.path("data")
    if root is None:
        raise ConfigError(f"paths.{key} (or paths.data) is required")
    files = sorted(root.glob(pattern)) if root.is_dir() else [root]
    if not files:
        raise FormatError(f"no {pattern} files in {root}")
    return files


def load_inputs(cfg: RunConfig):
    from .correspond import PointCloud
    from .geometry import CameraIntrinsics, Pose
    from .graph import load_feature_set
    from .io import load_json

    feature_sets = [load_feature_set(p) for p in _listed(cfg, "features", "features_*.json")]
    feature_sets.sort(key=lambda fs: fs.station)
    if [fs.station for fs in feature_sets] != list(range(len(feature_sets))):
        raise FormatError("feature files must cover stations 0..n-1 exactly once")
    clouds = [PointCloud.load(p) for p in _listed(cfg, "clouds", "cloud_*.ply")]
    if len(clouds) != len(feature_sets):
        raise FormatError(f"{len(feature_sets)} feature files but {len(clouds)} clouds")
    raw = load_json(_data_file(cfg, "rough_transforms", "rough_transforms.json"))
    try:
        transforms = {}
        for e in raw["pairs"]:
            i, j = int(e["target"]), int(e["source"])
            if not (0 <= i < j < len(clouds)):
                raise FormatError(f"rough transform pair ({i}, {j}) needs 0 <= target < source < {len(clouds)}")
            transforms[(i, j)] = Pose.from_dict(e)
        K = CameraIntrinsics.from_dict(load_json(_data_file(cfg, "intrinsics", "intrinsics.json")))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed input: {exc}") from exc
    if cfg.solver.initial_extrinsic is not None:
        Te = cfg.solver.initial_extrinsic
    else:
        guess = cfg.path("initial_extrinsic")
        if guess is None and cfg.path("data") is not None and (cfg.path("data") / "extrinsic_guess.json").exists():
            guess = cfg.path("data") / "extrinsic_guess.json"
        if guess is not None:
            try:
                Te = Pose.from_dict(load_json(guess))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"malformed extrinsic in {guess}: {exc}") from exc
        else:
            logger.warning("no initial extrinsic given; starting from the identity")
            Te = Pose.identity()
    return feature_sets, clouds, transforms, K, Te


def _pose_error(a, b):
    from .geometry import pose_distance
    t, r = pose_distance(a, b)
    return {"translation": float(t), "rotation": float(r)}


# -- commands ----------------------------------------------------------------

def cmd_synth(spec_path, out_dir, seed=None):
    """Generate a synthetic dataset (and optional stereo depth maps) on disk."""
    import numpy as np

    from .geometry import Pose
    from .io import dump_json
    from .synth import (SceneSpec, StereoSpec, generate, offset_pose, scale_intrinsics, simulate_stereo_depth,
                        truth_cloud, write_dataset)

    raw = _load_mapping(spec_path) if spec_path is not None else {}
    from .errors import InvalidSpec
    if "scene" in raw:
        extra = set(raw) - {"scene", "stereo", "truth_cloud_points", "extrinsic_guess"}
        if extra:
            raise InvalidSpec(f"{sorted(extra)[0]}: unknown field")
        scene_d, stereo_d = raw["scene"] or {}, raw.get("stereo")
    else:
        scene_d, stereo_d = raw, None
    scene_d = dict(scene_d)
    if seed is not None:
        scene_d["seed"] = int(seed)
    spec = SceneSpec.from_dict(scene_d)
    data = generate(spec)
    out = write_dataset(data, out_dir)
    gt = data.truth

    guess = raw.get("extrinsic_guess", {"distance": 0.05, "angle_deg": 3.0}) if "scene" in raw else {
        "distance": 0.05, "angle_deg": 3.0}
    Te0 = offset_pose(gt.extrinsic, float(guess["distance"]), np.radians(float(guess["angle_deg"])),
                      np.random.default_rng([spec.seed, 1]))
    dump_json(out / "extrinsic_guess.json", Te0.to_dict())

    if stereo_d is not None:
        try:
            st = StereoSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in stereo_d.items()})
        except TypeError as exc:
            raise InvalidSpec(f"stereo: {exc}") from exc
        if not 0 < st.scale <= 1:
            raise InvalidSpec("stereo.scale: must lie in (0, 1]")
        Kd = scale_intrinsics(gt.intrinsics, st.scale)
        rng = np.random.default_rng([spec.seed, 2])
        labels = {}
        for s, P in enumerate(gt.poses):
            depth, _, outl, holes = simulate_stereo_depth(gt.surfaces, P, Kd, st, rng)
            from .io import write_depth_map
            write_depth_map(out / f"depth_{s:03d}.dmap", depth)
            labels[str(s)] = {"outliers": int(outl.sum()), "holes": int(holes.sum())}
        dump_json(out / "depth_intrinsics.json", Kd.to_dict())
        n_truth = int(raw.get("truth_cloud_points", 200000))
        truth_cloud(gt.surfaces, n_truth, np.random.default_rng([spec.seed, 3])).save(out / "truth_cloud.ply")
        dump_json(out / "depth_labels.json", labels)

    # a ready-to-run config next to the data
    dump_json(out / "config.json", {"paths": {"data": ".", "truth": "truth.json", "output": "solved"},
                                    "seed": spec.seed})
    logger.info("wrote %d stations to %s", spec.stations, out)
    return out


def cmd_solve(cfg: RunConfig):
    """associate -> extract -> solve_joint; writes poses, extrinsic, report and state."""
    from .geometry import CameraIntrinsics, Pose
    from .graph import save_observations
    from .io import dump_json, load_json
    from .observability import check_uniqueness, motion_pairs, motion_pairs_from_clouds
    from .pipeline import build_problem
    from .solver import solve_joint

    feature_sets, clouds, transforms, K, Te0 = load_inputs(cfg)
    uniq_in = check_uniqueness(motion_pairs_from_clouds(transforms, Te0))
    if not uniq_in["unique"]:
        logger.warning("extrinsic may not be unique for this motion set: %s", "; ".join(uniq_in["reasons"]))
    prob, Ac, Al = build_problem(feature_sets, clouds, transforms, K, cfg.solver, Te0, cfg.matching)
    report = solve_joint(prob, cfg.solver)
    if report.unconstrained:
        logger.warning("unconstrained directions in the solution: %s", ", ".join(report.unconstrained))
    uniq = check_uniqueness(motion_pairs(prob.poses, prob.extrinsic))
    # rough registration noise can hide a degenerate motion set from the input check
    if uniq_in["unique"] and not uniq["unique"]:
        logger.warning("extrinsic may not be unique for the solved motion set: %s", "; ".join(uniq["reasons"]))

    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    dump_json(out / "poses.json", {"poses": [P.to_dict() for P in prob.poses]})
    dump_json(out / "extrinsic.json", prob.extrinsic.to_dict())
    rep = report.to_dict()
    rep["uniqueness"] = {"input": uniq_in, "solved": uniq}
    rep["landmarks"] = int(len(prob.landmarks))
    rep["observations"] = {"camera": int(len(prob.camera_obs)), "lidar": int(len(prob.lidar_obs))}
    truth = cfg.path("truth")
    if truth is not None:
        gt = load_json(truth)
        gt_poses = [Pose.from_dict(p) for p in gt["poses"]]
        rep["truth_error"] = {"extrinsic": _pose_error(prob.extrinsic, Pose.from_dict(gt["extrinsic"])),
                              "poses": [_pose_error(a, b) for a, b in zip(prob.poses, gt_poses)]}
    dump_json(out / "report.json", rep)
    dump_json(out / "state.json", {"poses": [P.to_dict() for P in prob.poses],
                                   "extrinsic": prob.extrinsic.to_dict(), "intrinsics": K.to_dict(),
                                   "solver": cfg.solver.to_dict()})
    save_observations(out / "observations.json", prob.camera_obs, prob.lidar_obs, prob.landmarks)
    logger.info("solved: cost %.6g after %d iterations (%s)", report.final_cost, report.iterations,
                report.status.value)
    return report


def _state_dir(cfg: RunConfig):
    d = cfg.path("state", cfg.output)
    if not (d / "state.json").exists():
        raise FormatError(f"no solved state in {d} (run 'solve' first)")
    return d


def load_solved_problem(cfg: RunConfig):
    from .geometry import CameraIntrinsics, Pose
    from .graph import CameraObservations, LidarObservations
    from .io import load_json
    from .solver import Problem

    d = _state_dir(cfg)
    st = load_json(d / "state.json")
    obs = load_json(d / "observations.json")
    try:
        prob = Problem([Pose.from_dict(p) for p in st["poses"]], obs.get("landmarks", []),
                       Pose.from_dict(st["extrinsic"]), CameraObservations.from_json(obs.get("camera")),
                       LidarObservations.from_json(obs.get("lidar")), CameraIntrinsics.from_dict(st["intrinsics"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed solved state in {d}: {exc}") from exc
    prob.apply_config(cfg.solver)
    return prob


def cmd_probe(cfg: RunConfig):
    """Cost sweeps along the six extrinsic dimensions at the solved state."""
    import numpy as np

    from .io import dump_json
    from .observability import DIMENSIONS, flatness_report, sweep_all, write_sweep_csv

    prob = load_solved_problem(cfg)
    sw = cfg.sweep
    half = {d: (sw.translation if d in ("x", "y", "z") else np.radians(sw.rotation_deg)) for d in DIMENSIONS}
    sweeps = sweep_all(prob, half, sw.steps)
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    for s in sweeps:
        write_sweep_csv(out / f"sweep_{s.dimension}.csv", s)
    verdict = flatness_report(sweeps, sw.rel_tol)
    dump_json(out / "flatness.json", {
        "verdict": verdict, "rel_tol": sw.rel_tol,
        "relative_variation": {s.dimension: s.relative_variation() for s in sweeps},
        "relative_rise": {s.dimension: s.relative_rise() for s in sweeps},
    })
    flat = [d for d, v in verdict.items() if v == "flat"]
    if flat:
        logger.warning("flat (unobservable) extrinsic dimensions: %s", ", ".join(flat))
    return verdict


def cmd_refine(cfg: RunConfig):
    """Two-fold refinement of every station's depth map, then model assembly."""
    import numpy as np

    from .correspond import PointCloud, estimate_normals
    from .geometry import CameraIntrinsics, Pose
    from .io import dump_json, load_json
    from .mapping import DepthMap, assemble_model, project_lidar_depth, remove_outliers, fill_holes

    d = _state_dir(cfg)
    st = load_json(d / "state.json")
    poses = [Pose.from_dict(p) for p in st["poses"]]
    Te = Pose.from_dict(st["extrinsic"])
    dm_files = _listed(cfg, "depth_maps", "depth_*.dmap")
    if len(dm_files) != len(poses):
        raise FormatError(f"{len(dm_files)} depth maps for {len(poses)} stations")
    kpath = dm_files[0].parent / "depth_intrinsics.json"
    K = CameraIntrinsics.from_dict(load_json(kpath if kpath.exists() else _data_file(
        cfg, "intrinsics", "intrinsics.json")))
    cloud_files = _listed(cfg, "clouds", "cloud_*.ply")
    rs = cfg.refine
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    refined, stats = [], []
    for s, (dm_path, cpath) in enumerate(zip(dm_files, cloud_files)):
        stereo = DepthMap.load(dm_path, frame=s)
        cloud = PointCloud.load(cpath)
        if cloud.normals is None or cloud.curvatures is None:
            cloud = estimate_normals(cloud, rs.normal_k)
        lidar = project_lidar_depth(cloud, poses[s], Te, K, (stereo.width, stereo.height), s)
        cleaned = remove_outliers(stereo, lidar, rs.max_diff, rs.radius, rs.reference)
        filled = fill_holes(cleaned, cloud, poses[s], Te, K, rs.max_curvature, np.radians(rs.max_view_angle_deg),
                            rs.radius)
        filled.save(out / f"refined_{s:03d}.dmap")
        refined.append(filled)
        stats.append({"station": s, "valid_in": int(stereo.valid.sum()),
                      "removed": int((stereo.valid & ~cleaned.valid).sum()),
                      "filled": int((filled.valid & ~cleaned.valid).sum()), "valid_out": int(filled.valid.sum())})
    model = assemble_model(refined, poses, K, rs.voxel_leaf)
    model.save(out / "model.ply")
    dump_json(out / "refine_report.json", {"stations": stats, "model_points": len(model)})
    return model


def cmd_eval(cfg: RunConfig):
    """Point-to-plane distances of the model against a truth cloud (optionally after ICP)."""
    from .correspond import PointCloud, estimate_normals
    from .evaluate import distance_map, icp_point_to_plane

    model_path = cfg.path("model", cfg.output / "model.ply")
    if not model_path.exists():
        raise FormatError(f"model {model_path} not found (run 'refine' first or set paths.model)")
    truth_path = cfg.path("truth_cloud")
    if truth_path is None and cfg.path("data") is not None:
        truth_path = cfg.path("data") / "truth_cloud.ply"
    if truth_path is None or not truth_path.exists():
        raise ConfigError("paths.truth_cloud is required for eval")
    model = PointCloud.load(model_path)
    truth = PointCloud.load(truth_path)
    ev = cfg.evaluate
    if truth.normals is None:
        truth = estimate_normals(truth, ev.normal_k)
    extra = {}
    if ev.icp:
        res = icp_point_to_plane(model, truth, max_corr_dist=ev.icp_max_corr_dist)
        model = model.transformed(res.pose)
        extra["icp"] = {"pose": res.pose.to_dict(), "converged": res.converged, "iterations": res.iterations,
                        "rmse": res.rmse}
    report = distance_map(model, truth, ev.max_dist, ev.bins, ev.signed)
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    data = report.to_json()
    data.update(extra)
    from .io import dump_json
    from .evaluate import write_histogram_csv
    dump_json(out / "distance_report.json", data)
    write_histogram_csv(out / "distance_histogram.csv", report)
    logger.info("mean distance %.4g m, median %.4g m over %d points", report.mean, report.median, report.count)
    return report


# -- entry point ---------------------------------------------------------------

def _global_flags(parser, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="run configuration (YAML or JSON)", **kw)
    parser.add_argument("--seed", type=int, help="overrides the config seed", **kw)
    parser.add_argument("--threads", type=int, help="numerical library threads", **kw)
    parser.add_argument("--verbose", "-v", action="count", **({"default": argparse.SUPPRESS} if suppress
                                                                else {"default": 0}))


def build_parser():
    p = argparse.ArgumentParser(prog="lcfusion", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    # global flags are accepted after the subcommand as well
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", help="generate a synthetic dataset", parents=[common])
    s.add_argument("spec", nargs="?", help="scene spec (YAML or JSON); defaults apply when omitted")
    s.add_argument("--out", "-o", required=True)
    for name, text in (("solve", "joint optimization"), ("probe", "extrinsic observability sweeps"),
                       ("refine", "two-fold depth refinement and model assembly"),
                       ("eval", "distance evaluation against a truth cloud")):
        c = sub.add_parser(name, help=text, parents=[common])
        c.add_argument("--out", "-o", help="output directory (overrides paths.output)")
    return p


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        # only effective when numpy has not been imported yet
        _set_threads(args.threads)
    try:
        if args.command == "synth":
            cmd_synth(args.spec, args.out, args.seed)
            return 0
        cfg = load_run_config(args.config, args.seed, args.out)
        {"solve": cmd_solve, "probe": cmd_probe, "refine": cmd_refine, "eval": cmd_eval}[args.command](cfg)
        return 0
    except FusionError as exc:
        print(f"lcfusion {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"lcfusion {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
