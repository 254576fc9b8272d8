"""Pipeline driver: simulate -> fuse -> calibrate -> train -> evaluate -> report.

Every subcommand accepts ``--config FILE`` (INI, one section per subcommand;
keys mirror the flag names, unknown keys are rejected). Explicit flags beat
config values beat defaults, and each run writes the fully resolved
configuration alongside its outputs. Errors exit nonzero with a single
machine-parsable line on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys

import numpy as np

from . import glfs as glfs_mod
from . import glfs_train, pipeline, planar, scaling, simulator, tsdf
from .cache import ObservationCache
from .errors import ConfigError, SemfuseError
from .frames import Intrinsics, load_scene
from .fusion import DEFAULT_LAPLACE_ALPHA, WeightScheme
from .metrics import DEFAULT_BINS, write_reliability_csv

log = logging.getLogger("semfuse")

FUSION_CHOICES = ["rbu", "hist", "avg", "geomean", "glfs"]
WEIGHT_CHOICES = ["const", "normal-dist", "quad-dist"]
METRIC_CHOICES = ["mece", "ece", "tl-ece"]


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def _convert(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    values = [v for v in raw.splitlines() if v.strip()] if isinstance(action, argparse._AppendAction) else None
    cast = action.type or str
    if values is not None:
        return [cast(v.strip()) for v in values]
    return cast(raw.strip())


def _apply_config(subparser: argparse.ArgumentParser, section: dict) -> None:
    known = {a.dest: a for a in subparser._actions if a.dest not in ("help",)}
    defaults = {}
    for key, raw in section.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise ConfigError(f"unknown config key {key!r}; known keys: {sorted(known)}")
        defaults[dest] = _convert(known[dest], raw)
    subparser.set_defaults(**defaults)


def _emit_resolved(args: argparse.Namespace, where: str) -> None:
    """Write the fully resolved flag values next to the run's outputs."""
    cp = configparser.ConfigParser()
    section = args.command
    cp[section] = {}
    for dest, value in sorted(vars(args).items()):
        if dest in ("command", "func", "config") or value is None:
            continue
        if isinstance(value, list):
            cp[section][dest] = "\n" + "\n".join(str(v) for v in value)
        else:
            cp[section][dest] = str(value)
    os.makedirs(where, exist_ok=True)
    with open(os.path.join(where, "resolved.ini"), "w") as fh:
        cp.write(fh)


def _out_dir_of(path: str) -> str:
    d = os.path.dirname(os.path.abspath(path))
    return d


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _parse_floats(raw: str) -> np.ndarray:
    return np.array([float(v) for v in raw.split()], dtype=np.float64)


def parse_sim_spec(path: str):
    """Scene + segmenter INI (sections [scene], [trajectory], [segmenter])."""
    if not os.path.exists(path):
        raise ConfigError(f"simulation spec not found: {path}")
    cp = configparser.ConfigParser()
    cp.read(path)
    sc = cp["scene"] if "scene" in cp else {}
    tr = cp["trajectory"] if "trajectory" in cp else {}
    sg = cp["segmenter"] if "segmenter" in cp else {}

    objects = []
    for line in sc.get("objects", "").splitlines():
        if not line.strip():
            continue
        vals = line.split()
        objects.append(
            simulator.Box(int(vals[0]), [float(v) for v in vals[1:4]], [float(v) for v in vals[4:7]])
        )
    dwell = []
    for line in tr.get("dwell", "").splitlines():
        if line.strip():
            d0, d1, m = (float(v) for v in line.split())
            dwell.append((d0, d1, m))
    intr = Intrinsics(
        fx=float(sc.get("fx", 160.0)),
        fy=float(sc.get("fy", 160.0)),
        cx=float(sc.get("cx", 160.0)),
        cy=float(sc.get("cy", 120.0)),
        width=int(sc.get("width", 320)),
        height=int(sc.get("height", 240)),
    )
    spec = simulator.SceneSpec(
        seed=int(sc.get("seed", 0)),
        room_min=_parse_floats(sc.get("room_min", "0 0 0")),
        room_max=_parse_floats(sc.get("room_max", "6 4 3")),
        objects=objects,
        voxel_size=float(sc.get("voxel_size", 0.05)),
        intrinsics=intr,
        frame_count=int(tr.get("frames", 60)),
        trajectory=simulator.TrajectorySpec(
            kind=tr.get("kind", "orbit"),
            radius=float(tr.get("radius", 1.4)),
            height=float(tr.get("height", 1.9)),
            look_height=float(tr.get("look_height", 0.7)),
            dwell=dwell,
            walk_margin=float(tr.get("walk_margin", 1.0)),
        ),
        floor_class=int(sc.get("floor_class", 0)),
        wall_class=int(sc.get("wall_class", 1)),
        class_names=sc.get("class_names").split(",") if sc.get("class_names") else None,
    )
    confusion = None
    if "confusion" in sg:
        rows = [r for r in sg["confusion"].splitlines() if r.strip()]
        confusion = np.array([[float(v) for v in r.split()] for r in rows])
    view_bias = None
    if "view_bias_target" in sg:
        region_min = region_max = None
        if "view_bias_region" in sg:
            vals = _parse_floats(sg["view_bias_region"])
            region_min, region_max = vals[:3], vals[3:6]
        view_bias = simulator.ViewBias(
            target_class=int(sg["view_bias_target"]),
            camera_region_min=region_min,
            camera_region_max=region_max,
            incidence_below=float(sg["view_bias_incidence_below"]) if "view_bias_incidence_below" in sg else None,
            apply_to_class=int(sg["view_bias_class"]) if "view_bias_class" in sg else None,
        )
    seg = simulator.SegmenterSpec(
        confusion=confusion,
        diag=float(sg.get("diag", 0.8)),
        tau_star=float(sg.get("tau_star", 1.0)),
        outlier_rate=float(sg.get("outlier_rate", 0.0)),
        outlier_conf=float(sg.get("outlier_conf", 0.99)),
        noise_scale=float(sg.get("noise_scale", 0.0)),
        persistence=float(sg.get("persistence", 0.0)),
        persistence_cell=float(sg.get("persistence_cell", 0.15)),
        view_bias=view_bias,
    )
    return spec, seg


def cmd_simulate(args) -> int:
    if args.spec:
        spec, seg = parse_sim_spec(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
    else:
        spec = simulator.standard_scene_spec(
            seed=args.seed if args.seed is not None else 7,
            frame_count=args.frames,
            voxel_size=args.voxel_size,
        )
        seg = simulator.standard_segmenter_spec(
            tau_star=args.tau_star,
            outlier_rate=args.outlier_rate,
            diag=args.diag,
            noise_scale=args.noise_scale,
            persistence=args.persistence,
        )
    simulator.generate_scene(spec, seg, out=args.out)
    _emit_resolved(args, args.out)
    log.info("wrote scene with %d frames to %s", spec.frame_count, args.out)
    return 0


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------


def _weight_scheme(args) -> WeightScheme:
    return WeightScheme(
        kind=args.weights,
        floor=args.weight_floor,
        d_ref=args.weight_dref,
        d_opt=args.weight_dopt,
        radius=args.weight_radius,
    )


def cmd_fuse(args) -> int:
    scene = load_scene(args.scene)
    scaling_params = scaling.ScalingParams.load(args.params) if args.params else None
    glfs_params = None
    if args.fusion == "glfs":
        if not args.glfs_params:
            raise ConfigError("--fusion glfs requires --glfs-params FILE")
        glfs_params = glfs_mod.GLFSParams.load(args.glfs_params)
    fused = pipeline.fuse_scene(
        scene,
        strategy=args.fusion,
        scheme=_weight_scheme(args),
        alpha=args.laplace_alpha,
        scaling=scaling_params,
        glfs_params=glfs_params,
        truncation_factor=args.truncation_factor,
        surface_band=args.surface_band,
        enable_cache=args.cache,
        threads=args.threads,
    )
    os.makedirs(args.out, exist_ok=True)
    calibration = "none"
    if args.params:
        calibration = os.path.splitext(os.path.basename(args.params))[0]
    pipeline.export_map(
        fused,
        os.path.join(args.out, "map.csv"),
        sidecar_extra={"fusion": args.fusion, "weights": args.weights, "calibration": calibration},
    )
    if args.cache:
        fused.cache.save(os.path.join(args.out, "cache.npz"))
    _emit_resolved(args, args.out)
    log.info(
        "fused %d frames: %d surface voxels (%d labeled)",
        len(scene.frames),
        fused.surface_idx.size,
        int(np.count_nonzero(fused.grid.gt_label >= 0)),
    )
    return 0


# ---------------------------------------------------------------------------
# calibrate / train
# ---------------------------------------------------------------------------


def cmd_calibrate_2d(args) -> int:
    scenes = [load_scene(p) for p in args.scene]
    params = scaling.calibrate_2d(
        scenes,
        objective=scaling.CalibrationObjective(args.metric.replace("-", "_"), args.bins),
        mode=args.mode,
        stride=args.pixel_stride,
        seed=args.seed,
        max_evals=args.max_evals,
    )
    params.save(args.out)
    _emit_resolved(args, _out_dir_of(args.out))
    log.info("2-D %s scaling -> %s (tau=%s)", args.mode, args.out, params.tau)
    return 0


def cmd_calibrate_3d(args) -> int:
    caches = [ObservationCache.load(p) for p in args.cache]
    glfs_params = glfs_mod.GLFSParams.load(args.glfs_params) if args.glfs_params else None
    params = scaling.calibrate_3d(
        caches,
        strategy=args.fusion,
        objective=scaling.CalibrationObjective(args.metric.replace("-", "_"), args.bins),
        mode=args.mode,
        scheme=_weight_scheme(args),
        alpha=args.laplace_alpha,
        glfs_params=glfs_params,
        seed=args.seed,
        max_evals=args.max_evals,
    )
    params.save(args.out)
    _emit_resolved(args, _out_dir_of(args.out))
    log.info("3-D %s scaling -> %s (tau=%s)", args.mode, args.out, params.tau)
    return 0


def cmd_train_glfs(args) -> int:
    cache = ObservationCache.load(args.cache)
    config = glfs_mod.TrainerConfig(
        eta=args.eta,
        bins=args.bins,
        sharpness=args.sharpness,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        max_cache_voxels=args.max_voxels,
        alpha=args.laplace_alpha,
    )
    if args.init == "trainable":
        init = glfs_mod.GLFSParams.trainable_init(cache.class_count, args.dist_bins, args.inc_bins)
    else:
        init = glfs_mod.GLFSParams.strategy_equivalent(args.init, cache.class_count, args.dist_bins, args.inc_bins)
    params, history = glfs_train.train_glfs(cache, init, config)
    params.save(args.out)
    history_path = args.history or args.out + ".history.csv"
    with open(history_path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{v:.17g}\n")
    _emit_resolved(args, _out_dir_of(args.out))
    log.info("trained GLFS: loss %.6f -> %.6f (%s)", history[0], min(history), args.out)
    return 0


# ---------------------------------------------------------------------------
# evaluate / project-map / report
# ---------------------------------------------------------------------------


def _evaluate_target(preds, bins, meta, out_dir, target) -> dict:
    payload = pipeline.evaluate_predictions(preds, bins, meta)
    with open(os.path.join(out_dir, f"metrics_{target}.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    tables = pipeline.reliability_tables(preds, bins)
    write_reliability_csv(tables["none"], os.path.join(out_dir, f"reliability_{target}_none.csv"))
    write_reliability_csv(tables["gt-class"], os.path.join(out_dir, f"reliability_{target}_gt.csv"))
    return payload


def cmd_evaluate(args) -> int:
    if not args.map and not args.scene:
        raise ConfigError("evaluate needs --map and/or --scene")
    os.makedirs(args.out, exist_ok=True)
    label = args.label or "run"
    if args.map:
        preds, _, sidecar = pipeline.prediction_set_from_map_csv(args.map)
        meta = {
            "target": "voxels",
            "label": label,
            "fusion": sidecar.get("fusion", ""),
            "calibration": sidecar.get("calibration", ""),
        }
        payload = _evaluate_target(preds, args.bins, meta, args.out, "voxel")
        log.info("voxel metrics: %s", {k: round(v, 4) for k, v in payload.items() if k != "meta"})
    if args.scene:
        scene = load_scene(args.scene)
        params = scaling.ScalingParams.load(args.params) if args.params else None
        preds = pipeline.pixel_prediction_set(scene, params, stride=args.pixel_stride)
        meta = {
            "target": "pixels",
            "label": label,
            "calibration": os.path.splitext(os.path.basename(args.params))[0] if args.params else "none",
        }
        payload = _evaluate_target(preds, args.bins, meta, args.out, "pixel")
        log.info("pixel metrics: %s", {k: round(v, 4) for k, v in payload.items() if k != "meta"})
    _emit_resolved(args, args.out)
    return 0


def cmd_project_map(args) -> int:
    cols, meta = tsdf.read_map_csv(args.map)
    ok = cols["pred_label"] >= 0
    origin = np.asarray(meta["origin"], dtype=np.float64)
    vs = float(meta["voxel_size"])
    ijk = np.stack([cols["ix"][ok], cols["iy"][ok], cols["iz"][ok]], axis=1)
    centers = origin + (ijk + 0.5) * vs
    pm = planar.project_to_planar_map(
        centers,
        cols["pred_label"][ok].astype(np.int64),
        cols["confidence"][ok],
        class_count=int(meta.get("class_count", int(cols["pred_label"].max()) + 1)),
        cell_size=args.cell_size,
        height_band=(args.zmin, args.zmax),
    )
    os.makedirs(args.out, exist_ok=True)
    planar.write_planar_csv(pm, os.path.join(args.out, "planar.csv"))
    planar.write_pgm(pm.top_label, os.path.join(args.out, "top_labels.pgm"))
    if args.goal_class is not None:
        mask = pm.goal_mask(args.goal_class, args.goal_threshold)
        filtered = planar.largest_connected_component(mask)
        planar.write_pgm(filtered.astype(np.int32) - (~filtered).astype(np.int32) * 1, os.path.join(args.out, "goal_mask.pgm"), max_label=1)
    _emit_resolved(args, args.out)
    log.info("planar map %sx%s cells -> %s", pm.shape[0], pm.shape[1], args.out)
    return 0


def cmd_report(args) -> int:
    fields = ["ece", "tl_ece", "mece", "brier", "nll", "miou"]
    rows = []
    for path in args.metrics:
        with open(path) as fh:
            payload = json.load(fh)
        meta = payload.get("meta", {})
        rows.append(
            {
                "label": meta.get("label", os.path.splitext(os.path.basename(path))[0]),
                "fusion": meta.get("fusion", ""),
                "calibration": meta.get("calibration", ""),
                "target": meta.get("target", ""),
                **{f: payload[f] for f in fields},
            }
        )
    with open(args.out, "w") as fh:
        fh.write("label,fusion,calibration,target," + ",".join(fields) + "\n")
        for r in rows:
            fh.write(
                f'{r["label"]},{r["fusion"]},{r["calibration"]},{r["target"]},'
                + ",".join(f"{r[f]:.17g}" for f in fields)
                + "\n"
            )
    _emit_resolved(args, _out_dir_of(args.out))
    log.info("report with %d rows -> %s", len(rows), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_weight_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", choices=WEIGHT_CHOICES, default="const", help="per-view weight scheme")
    p.add_argument("--weight-floor", type=float, default=0.05, help="weight lower bound")
    p.add_argument("--weight-dref", type=float, default=1.0, help="normal-dist reference distance (m)")
    p.add_argument("--weight-dopt", type=float, default=1.5, help="quad-dist sweet-spot distance (m)")
    p.add_argument("--weight-radius", type=float, default=2.0, help="quad-dist falloff radius (m)")


def build_parser():
    parser = argparse.ArgumentParser(prog="semfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file (section [%s])" % name)
        p.set_defaults(func=func, command=name)
        subparsers[name] = p
        return p

    p = add("simulate", cmd_simulate, "generate a synthetic labeled scene")
    p.add_argument("--out", required=True, help="scene output directory")
    p.add_argument("--spec", help="scene+segmenter INI spec (overrides fixture flags)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--voxel-size", type=float, default=0.05)
    p.add_argument("--tau-star", type=float, default=1.0, help="evidence temperature (<1 = overconfident)")
    p.add_argument("--outlier-rate", type=float, default=0.0)
    p.add_argument("--noise-scale", type=float, default=0.35)
    p.add_argument("--persistence", type=float, default=0.75, help="cross-view error correlation in [0,1]")
    p.add_argument("--diag", type=float, default=0.8, help="confusion matrix diagonal")

    p = add("fuse", cmd_fuse, "build a semantically fused voxel map")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fusion", choices=FUSION_CHOICES, default="rbu")
    _add_weight_flags(p)
    p.add_argument("--laplace-alpha", type=float, default=DEFAULT_LAPLACE_ALPHA)
    p.add_argument("--params", help="scaling params JSON applied to logits")
    p.add_argument("--glfs-params", help="trained GLFS params JSON (required for --fusion glfs)")
    p.add_argument("--cache", action="store_true", help="write the voxel observation cache")
    p.add_argument("--truncation-factor", type=float, default=tsdf.DEFAULT_TRUNCATION_FACTOR)
    p.add_argument("--surface-band", type=float, default=None)
    p.add_argument("--threads", type=int, default=0, help="kernel threads (0 = all cores)")

    p = add("calibrate-2d", cmd_calibrate_2d, "fit scaling against pixel calibration")
    p.add_argument("--scene", action="append", required=True, help="scene directory (repeatable)")
    p.add_argument("--out", required=True, help="params JSON output")
    p.add_argument("--mode", choices=["temp", "vector"], default="temp")
    p.add_argument("--metric", choices=METRIC_CHOICES, default="mece")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--pixel-stride", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-evals", type=int, default=scaling.REFINE_MAX_EVALS)

    p = add("calibrate-3d", cmd_calibrate_3d, "fit scaling against fused-map calibration")
    p.add_argument("--cache", action="append", required=True, help="observation cache npz (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["temp", "vector"], default="temp")
    p.add_argument("--metric", choices=METRIC_CHOICES, default="mece")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--fusion", choices=FUSION_CHOICES, default="rbu")
    _add_weight_flags(p)
    p.add_argument("--laplace-alpha", type=float, default=DEFAULT_LAPLACE_ALPHA)
    p.add_argument("--glfs-params", help="GLFS params JSON when --fusion glfs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-evals", type=int, default=scaling.REFINE_MAX_EVALS)

    p = add("train-glfs", cmd_train_glfs, "train the learned fusion strategy")
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True, help="trained params JSON")
    p.add_argument("--history", help="loss history CSV (default: <out>.history.csv)")
    p.add_argument("--eta", type=float, default=1.0, help="calibration term weight")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--sharpness", type=float, default=0.02, help="soft-bin sharpness")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-voxels", type=int, default=500_000)
    p.add_argument("--laplace-alpha", type=float, default=DEFAULT_LAPLACE_ALPHA)
    p.add_argument("--init", choices=["trainable", "rbu", "geomean", "avg"], default="trainable")
    p.add_argument("--dist-bins", type=int, default=glfs_mod.DEFAULT_DIST_BINS)
    p.add_argument("--inc-bins", type=int, default=glfs_mod.DEFAULT_INC_BINS)

    p = add("evaluate", cmd_evaluate, "compute calibration/accuracy metrics")
    p.add_argument("--map", help="voxel map CSV from fuse")
    p.add_argument("--scene", help="scene directory for pixel metrics")
    p.add_argument("--params", help="scaling params applied to pixel logits")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--pixel-stride", type=int, default=1)
    p.add_argument("--label", help="row label used by report")

    p = add("project-map", cmd_project_map, "project the voxel map to a 2-D top-down map")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cell-size", type=float, default=0.1)
    p.add_argument("--zmin", type=float, default=planar.DEFAULT_HEIGHT_BAND[0])
    p.add_argument("--zmax", type=float, default=planar.DEFAULT_HEIGHT_BAND[1])
    p.add_argument("--goal-class", type=int, default=None)
    p.add_argument("--goal-threshold", type=float, default=0.0)

    p = add("report", cmd_report, "merge metrics JSONs into a comparison CSV")
    p.add_argument("metrics", nargs="+", help="metrics JSON files")
    p.add_argument("--out", required=True)

    return parser, subparsers


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser, subparsers = build_parser()
    try:
        # apply config-file defaults to the chosen subcommand before parsing
        command = next((a for a in argv if not a.startswith("-")), None)
        if command in subparsers and "--config" in argv:
            cfg_path = argv[argv.index("--config") + 1]
            cp = configparser.ConfigParser()
            if not cp.read(cfg_path):
                raise ConfigError(f"config file not found: {cfg_path}")
            if cp.has_section(command):
                _apply_config(subparsers[command], dict(cp[command]))
        args = parser.parse_args(argv)
        return args.func(args)
    except SemfuseError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
