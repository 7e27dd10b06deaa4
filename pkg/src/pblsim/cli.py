"""Command-line frontend.

Exit status: 0 on success, 2 on configuration or input errors, 3 on numeric
failures (divergence, non-finite values).
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import math
import os
import platform
import sys
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from . import __version__
from .calibration import (CalibProblem, CalibrationDiverged, FreeMask, calibrate, init_from_rings,
                          recover_rings)
from .field.fit import FitConfig, FitDiverged, Observation, fit
from .field.render import Pinhole, render_camera, render_scan
from .geometry import PointCloud, Pose, RangeImage, project, unproject, xyz_image
from .io import formats as fmt
from .io.synth import (Noise, SceneSpec, corridor_primitives, courtyard_primitives, hdl64_like,
                       planted_params, street_primitives, synthesize_scan, voxelize)
from .normals import estimate_normals, incidence_image, repair_edges
from .optim import OptimizerConfig
from .sensor_model import EFFECTS, LossWeights, analyze_statistics

WORKERS_ENV = "PBLSIM_WORKERS"
DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# YAML configs with line numbers
# ---------------------------------------------------------------------------

@dataclass
class Opt:
    """One config key: ``kind`` in int, float, bool, str, floats, ints, strs, any, or a nested schema."""

    kind: Any
    default: Any = None
    choices: Optional[Tuple] = None
    length: Optional[int] = None


def _lines(node, path, out):
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _lines(v, key, out)


def _coerce(kind, value, where):
    def bad(what):
        raise ConfigError(f"{where}: expected {what}, got {value!r}")

    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            bad("an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad("a number")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            bad("true or false")
        return value
    if kind == "str":
        if not isinstance(value, str):
            bad("a string")
        return value
    if kind in ("floats", "ints", "strs"):
        if not isinstance(value, list):
            bad("a list")
        return [_coerce(kind[:-1], v, where) for v in value]
    return value


def _validate(data, schema, path, lines, src):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{src}: expected a mapping at {'.'.join(path) or 'top level'}")
    out = {}
    for key in data:
        if key not in schema:
            ln = lines.get(path + (key,), "?")
            raise ConfigError(f"{src}:{ln}: unknown key {'.'.join(path + (key,))!r}")
    for key, opt in schema.items():
        where = f"{src}:{lines.get(path + (key,), '?')}: {'.'.join(path + (key,))}"
        if isinstance(opt, dict):
            out[key] = _validate(data.get(key), opt, path + (key,), lines, src)
            continue
        if key not in data or data[key] is None:
            out[key] = opt.default
            continue
        v = _coerce(opt.kind, data[key], where)
        if opt.choices is not None and v not in opt.choices:
            raise ConfigError(f"{where}: must be one of {list(opt.choices)}, got {v!r}")
        if opt.kind in ("floats", "ints", "strs") and opt.choices is None and opt.length is not None \
                and len(v) != opt.length:
            raise ConfigError(f"{where}: expected {opt.length} values, got {len(v)}")
        out[key] = v
    return out


def load_config(path, schema) -> Dict[str, Any]:
    """Parse ``path`` and validate it against ``schema``; errors carry line numbers."""
    try:
        text = open(path).read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        ln = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"{path}:{ln}: invalid YAML ({getattr(exc, 'problem', exc)})")
    lines: Dict[tuple, int] = {}
    if node is not None:
        _lines(node, (), lines)
    return _validate(data, schema, (), lines, path)


def config_defaults(schema) -> Dict[str, Any]:
    return _validate({}, schema, (), {}, "<defaults>")


def _check_effects(effects, where):
    bad = set(effects) - set(EFFECTS)
    if bad:
        raise ConfigError(f"{where}: unknown effects {sorted(bad)}")
    return frozenset(effects)


# ---------------------------------------------------------------------------
# manifests and helpers
# ---------------------------------------------------------------------------

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import cv2
    import scipy
    return {"pblsim": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "opencv": cv2.__version__, "python": platform.python_version()}


def write_manifest(out_dir, command, config, inputs=()):
    """Config hash, library versions, input and output hashes; no timestamps."""
    canon = json.dumps(config, sort_keys=True, default=str)
    outputs = {}
    for name in sorted(os.listdir(out_dir)):
        p = os.path.join(out_dir, name)
        if os.path.isfile(p) and name != "manifest.json":
            outputs[name] = file_sha256(p)
    manifest = {
        "command": command,
        "config": json.loads(canon),
        "config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
        "versions": _versions(),
        "inputs": {str(p): file_sha256(p) for p in sorted(set(map(str, inputs)))},
        "outputs": outputs,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def default_workers() -> int:
    v = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(v)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {v!r}")
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be positive")
    return n


def _workers(args) -> int:
    return args.workers if getattr(args, "workers", None) else default_workers()


def _resolve(base, p):
    return p if p is None or os.path.isabs(p) else os.path.join(base, p)


def _pose_from_list(v, where) -> Pose:
    a = np.asarray(v, dtype=np.float64)
    if a.size == 3:
        return Pose(a)
    if a.size == 7:
        return Pose(a[:3], a[3:])
    if a.size == 12:
        return Pose.from_matrix(np.vstack([a.reshape(3, 4), [0, 0, 0, 1]]))
    raise ConfigError(f"{where}: pose needs 3 (translation), 7 (t + quaternion) or 12 (3x4) numbers")


def _yaw(angle):
    return np.array([0.0, 0.0, math.sin(angle / 2), math.cos(angle / 2)])


def save_range_outputs(out_dir, stem, img: RangeImage, cos=None, depth_scale=256.0):
    extra = {} if cos is None else {"cos": np.asarray(cos, dtype=np.float64)}
    fmt.save_range_npz(os.path.join(out_dir, f"{stem}.npz"), img, **extra)
    ok_png = float(np.max(img.depth, initial=0.0)) * depth_scale <= fmt.U16
    if ok_png:
        fmt.write_range_png(img, os.path.join(out_dir, f"{stem}_depth.png"),
                            os.path.join(out_dir, f"{stem}_intensity.png"), depth_scale)
    if cos is not None:
        fmt.write_incidence_png(os.path.join(out_dir, f"{stem}_cos.png"), cos)


def load_range(path, intensity_path=None, depth_scale=256.0):
    """Range image plus optional stored cosine image."""
    if str(path).endswith(".npz"):
        img, extra = fmt.load_range_npz(path)
        return img, extra.get("cos")
    return fmt.read_range_png(path, intensity_path, depth_scale), None


# ---------------------------------------------------------------------------
# bar-plot rasterizer
# ---------------------------------------------------------------------------

def bar_plot(values, errors=None, size=(480, 320), margin=30, color=(60, 110, 200)) -> np.ndarray:
    """RGB uint8 bar chart with error whiskers; NaN bars are skipped."""
    W, H = size
    img = np.full((H, W, 3), 255, dtype=np.uint8)
    v = np.asarray(values, dtype=np.float64)
    e = np.zeros_like(v) if errors is None else np.nan_to_num(np.asarray(errors, dtype=np.float64))
    fin = np.isfinite(v)
    top = float(np.max(np.where(fin, v + e, 0.0), initial=0.0))
    top = top if top > 0 else 1.0
    x0, x1, y0, y1 = margin, W - margin // 2, margin // 2, H - margin
    img[y1, x0:x1] = 0
    img[y0:y1 + 1, x0] = 0
    n = max(len(v), 1)
    slot = (x1 - x0) / n
    for k in range(len(v)):
        if not fin[k]:
            continue
        a = int(round(x0 + (k + 0.15) * slot))
        b = max(int(round(x0 + (k + 0.85) * slot)), a + 1)
        h = int(round((y1 - y0) * max(v[k], 0.0) / top))
        img[y1 - h:y1, a:b] = color
        if e[k] > 0:
            c = (a + b) // 2
            lo = int(round((y1 - y0) * max(v[k] - e[k], 0.0) / top))
            hi = int(round((y1 - y0) * (v[k] + e[k]) / top))
            img[y1 - hi:y1 - lo + 1, c] = 0
            img[y1 - hi, max(c - 2, a):min(c + 3, b)] = 0
            img[y1 - lo, max(c - 2, a):min(c + 3, b)] = 0
    # tick marks at quarters of the value axis
    for q in range(5):
        y = int(round(y1 - (y1 - y0) * q / 4))
        img[y, x0 - 4:x0] = 0
    return img


def write_bar_plot(path, values, errors=None, **kw):
    import cv2
    img = bar_plot(values, errors, **kw)
    if not cv2.imwrite(str(path), img[..., ::-1]):
        raise OSError(f"could not write {path}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

SYNTH_SCHEMA = {
    "scene": Opt("str", "courtyard", choices=("courtyard", "street", "corridor")),
    "width": Opt("int", 256),
    "intrinsics": Opt("str", "hdl64"),
    "diode_seed": Opt("int", None),
    "frames": Opt("int", 3),
    "start": Opt("floats", [0.5, -0.3, 0.0], length=3),
    "speed": Opt("float", 0.5),
    "yaw_rate": Opt("float", 0.0),
    "params": {
        "seed": Opt("int", 1),
        "laser": Opt("bool", True),
        "distance": Opt("bool", True),
        "incidence": Opt("bool", True),
    },
    "noise": {"depth": Opt("float", 0.0), "intensity": Opt("float", 0.0)},
    "shutter": Opt("bool", True),
    "effects": Opt("strs", ["distance", "incidence", "laser"]),
    "observations": Opt("str", "analytic", choices=("analytic", "field")),
    "max_range": Opt("float", 80.0),
    "field": {
        "dims": Opt("ints", [72, 72, 30], length=3),
        "cell_size": Opt("float", 0.3),
        "origin": Opt("floats", [-10.8, -10.8, -2.5], length=3),
        "density": Opt("float", 40.0),
    },
    "seed": Opt("int", 0),
}

SCENES = {"courtyard": courtyard_primitives, "street": street_primitives, "corridor": corridor_primitives}


def _synth_intrinsics(cfg, base):
    if cfg["intrinsics"] == "hdl64":
        return hdl64_like(cfg["width"], seed=cfg["diode_seed"])
    return fmt.read_intrinsics(_resolve(base, cfg["intrinsics"]))


def run_synth(cfg, out_dir, base=".", workers=1):
    if cfg["frames"] < 1:
        raise ConfigError("frames must be >= 1")
    effects = _check_effects(cfg["effects"], "effects")
    intr = _synth_intrinsics(cfg, base)
    pc = cfg["params"]
    params = planted_params(intr.height, pc["seed"], pc["laser"], pc["distance"], pc["incidence"])
    prims = SCENES[cfg["scene"]]()
    start = np.asarray(cfg["start"])
    traj = [Pose(start + [cfg["speed"] * k, 0.0, 0.0], _yaw(cfg["yaw_rate"] * k))
            for k in range(cfg["frames"])]
    spec = SceneSpec(prims, intr, params, traj, Noise(**cfg["noise"]), cfg["seed"], cfg["max_range"],
                     effects, cfg["shutter"])
    fc = cfg["field"]
    fld = voxelize(prims, tuple(fc["dims"]), fc["cell_size"], fc["origin"], fc["density"])
    os.makedirs(out_dir, exist_ok=True)
    fmt.write_intrinsics(os.path.join(out_dir, "intrinsics.ini"), intr)
    fmt.write_poses(os.path.join(out_dir, "poses.txt"), list(enumerate(traj)))
    fmt.save_params(os.path.join(out_dir, "params_truth.json"), params)
    fmt.save_field(os.path.join(out_dir, "field.pblf"), fld)
    for k in range(spec.n_frames):
        stem = f"frame_{k:04d}"
        if cfg["observations"] == "analytic":
            scan = synthesize_scan(spec, k)
            img, cos, cloud = scan.image, scan.cos_incidence, scan.cloud
            fmt.write_normals_png(os.path.join(out_dir, f"{stem}_normals.png"), scan.normals,
                                  scan.primitive >= 0)
        else:
            p0, p1 = spec.frame_poses(k)
            truth, res = render_scan(fld, intr, p0, p1, params, cfg["shutter"], effects=effects,
                                     max_range=cfg["max_range"], workers=workers)
            rng = np.random.default_rng([cfg["seed"], k])
            dn = rng.normal(0.0, 1.0, truth.depth.shape) * cfg["noise"]["depth"]
            inn = rng.normal(0.0, 1.0, truth.depth.shape) * cfg["noise"]["intensity"]
            v = truth.valid
            img = RangeImage(np.where(v, np.maximum(truth.depth + dn, 1e-3), 0.0),
                             np.where(v, np.clip(truth.intensity + inn, 0.0, 1.0), 0.0))
            cos = res.cos_incidence
            cloud = unproject(img, intr)
        save_range_outputs(out_dir, stem, img, cos)
        fmt.save_cloud_npz(os.path.join(out_dir, f"{stem}_cloud.npz"), cloud)
        order = np.lexsort((cloud.col, cloud.ring))
        fmt.write_kitti_bin(os.path.join(out_dir, f"{stem}.bin"),
                            PointCloud(cloud.positions[order], cloud.intensity[order]))
    return spec


def cmd_synth(args):
    path = args.config or os.path.join(DATA_DIR, "demo_synth.yaml")
    cfg = load_config(path, SYNTH_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    run_synth(cfg, args.out, os.path.dirname(os.path.abspath(path)), _workers(args))
    write_manifest(args.out, "synth", cfg, [args.config] if args.config else [])


# ---------------------------------------------------------------------------
# project / unproject / normals
# ---------------------------------------------------------------------------

def cmd_project(args):
    intr = fmt.read_intrinsics(args.intrinsics)
    cloud = fmt.read_cloud(args.cloud)
    img, stats = project(cloud, intr)
    os.makedirs(args.out, exist_ok=True)
    save_range_outputs(args.out, "range", img)
    with open(os.path.join(args.out, "stats.json"), "w") as fh:
        json.dump({k: int(getattr(stats, k)) for k in ("n_points", "n_written", "n_collisions", "n_dropped")},
                  fh, indent=1, sort_keys=True)
    write_manifest(args.out, "project", vars_config(args), [args.intrinsics, args.cloud])


def cmd_unproject(args):
    intr = fmt.read_intrinsics(args.intrinsics)
    img, _ = load_range(args.range, args.intensity, args.depth_scale)
    if (img.height, img.width) != (intr.height, intr.width):
        raise ConfigError("range image size does not match the intrinsics")
    cloud = unproject(img, intr)
    out = args.out
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    fmt.write_cloud(out, cloud)
    inputs = [args.intrinsics, args.range] + ([args.intensity] if args.intensity else [])
    manifest_dir = os.path.dirname(os.path.abspath(out))
    write_manifest(manifest_dir, "unproject", vars_config(args), inputs)


def cmd_normals(args):
    intr = fmt.read_intrinsics(args.intrinsics)
    img, _ = load_range(args.range, args.intensity, args.depth_scale)
    xyz = xyz_image(img, intr)
    nimg = estimate_normals(xyz, intr, img.valid)
    nimg = repair_edges(nimg, img.depth, args.edge_threshold, math.radians(args.artifact_threshold))
    cos, shallow = incidence_image(nimg, intr, math.radians(args.incidence_threshold))
    os.makedirs(args.out, exist_ok=True)
    fmt.write_normals_png(os.path.join(args.out, "normals.png"), nimg.normal, nimg.valid)
    fmt.write_incidence_png(os.path.join(args.out, "incidence.png"), cos)
    fmt.write_mask_png(os.path.join(args.out, "edges.png"), nimg.edge_flags != 0)
    fmt.write_mask_png(os.path.join(args.out, "shallow.png"), shallow)
    fmt.save_npz(os.path.join(args.out, "normals.npz"), normal=nimg.normal, cos=cos,
                 edge_flags=nimg.edge_flags.astype(np.int64), valid=nimg.valid)
    write_manifest(args.out, "normals", vars_config(args), [args.intrinsics, args.range])


def vars_config(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "workers")}


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

CALIB_SCHEMA = {
    "frames": Opt("strs", []),
    "width": Opt("int", 1024),
    "height": Opt("int", 64),
    "recover_rings": Opt("bool", True),
    "init": Opt("str", "rings"),
    "iterations": Opt("int", 2000),
    "lr": Opt("float", 1e-3),
    "lr_final_factor": Opt("float", 1.0),
    "refine_iterations": Opt("int", 30),
    "weights": Opt("floats", [1.0, 0.0, 1.0, 1.0], length=4),
    "free": {
        "fov": Opt("bool", True),
        "fov_offset": Opt("bool", True),
        "z_offset": Opt("bool", True),
        "diode_offsets": Opt("bool", True),
    },
    "seed": Opt("int", 0),
}


def cmd_calibrate(args):
    cfg = load_config(args.config, CALIB_SCHEMA)
    base = os.path.dirname(os.path.abspath(args.config))
    paths = []
    for pat in cfg["frames"]:
        hits = sorted(glob.glob(_resolve(base, pat)))
        if not hits:
            raise ConfigError(f"{args.config}: no files match {pat!r}")
        paths.extend(hits)
    if not paths:
        raise ConfigError(f"{args.config}: frames list is empty")
    frames = []
    for p in paths:
        c = fmt.read_cloud(p)
        if cfg["recover_rings"] or c.ring is None:
            c = recover_rings(c, cfg["width"], cfg["height"])
        frames.append(c)
    if cfg["init"] == "rings":
        init = init_from_rings(frames, cfg["width"], cfg["height"])
    elif cfg["init"] == "hdl64":
        init = hdl64_like(cfg["width"])
    else:
        init = fmt.read_intrinsics(_resolve(base, cfg["init"]))
    if (init.width, init.height) != (cfg["width"], cfg["height"]):
        raise ConfigError("initial intrinsics size does not match width/height")
    n = len(init.units)
    fr = cfg["free"]
    mask = FreeMask([fr["fov"]] * n, [fr["fov_offset"]] * n, [fr["z_offset"]] * n,
                    np.full(init.height, fr["diode_offsets"]))
    opt = OptimizerConfig(lr=cfg["lr"], iterations=cfg["iterations"], lr_final_factor=cfg["lr_final_factor"],
                          seed=cfg["seed"])
    rep = calibrate(CalibProblem(frames, init, mask, tuple(cfg["weights"])), opt, cfg["refine_iterations"])
    os.makedirs(args.out, exist_ok=True)
    fmt.write_intrinsics(os.path.join(args.out, "intrinsics.ini"), rep.final)
    rep.history_csv(os.path.join(args.out, "history.csv"))
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump({"initial_loss": rep.initial_loss, "best_loss": rep.loss_history[rep.best_iteration],
                   "best_iteration": rep.best_iteration, "evaluations": rep.evaluations,
                   "residuals": rep.per_channel_residuals}, fh, indent=1, sort_keys=True)
    write_manifest(args.out, "calibrate", cfg, [args.config] + paths)


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

ANALYZE_SCHEMA = {
    "frames": Opt("strs", []),
    "intrinsics": Opt("str", None),
    "distance_bins": Opt("floats", [0, 5, 10, 15, 20, 30, 40, 60, 80]),
    "angle_bins_deg": Opt("floats", [0, 10, 20, 30, 40, 50, 60, 70, 80, 90]),
    "use_stored_cos": Opt("bool", False),
}


def cmd_analyze(args):
    cfg = load_config(args.config, ANALYZE_SCHEMA)
    base = os.path.dirname(os.path.abspath(args.config))
    if cfg["intrinsics"] is None:
        raise ConfigError(f"{args.config}: intrinsics is required")
    intr = fmt.read_intrinsics(_resolve(base, cfg["intrinsics"]))
    paths = []
    for pat in cfg["frames"]:
        hits = sorted(glob.glob(_resolve(base, pat)))
        if not hits:
            raise ConfigError(f"{args.config}: no files match {pat!r}")
        paths.extend(hits)
    if not paths:
        raise ConfigError(f"{args.config}: frames list is empty")
    data = []
    for p in paths:
        img, cos = load_range(p)
        if cos is None or not cfg["use_stored_cos"]:
            from .normals import incidence_from_depth
            cos, _ = incidence_from_depth(img.depth, intr)
        data.append((img, cos))
    table = analyze_statistics(data, cfg["distance_bins"], np.radians(cfg["angle_bins_deg"]))
    os.makedirs(args.out, exist_ok=True)
    table.to_csv(os.path.join(args.out, "stats.csv"))
    ba, bd = table.by_angle(), table.by_distance()
    ba.to_csv(os.path.join(args.out, "by_angle.csv"))
    bd.to_csv(os.path.join(args.out, "by_distance.csv"))
    write_bar_plot(os.path.join(args.out, "by_angle.png"), ba.mean.reshape(-1), ba.std.reshape(-1))
    write_bar_plot(os.path.join(args.out, "by_distance.png"), bd.mean.reshape(-1), bd.std.reshape(-1))
    write_manifest(args.out, "analyze", cfg, [args.config] + paths)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

FIT_SCHEMA = {
    "data": Opt("str", "."),
    "field": Opt("str", None),
    "init_params": Opt("str", None),
    "reset": Opt("strs", []),
    "free": Opt("strs", ["laser"]),
    "frames": Opt("ints", None),
    "iterations": Opt("int", 600),
    "lr": Opt("float", 2e-2),
    "lr_final_factor": Opt("float", 0.01),
    "group_lr": Opt("any", {}),
    "batch_rays": Opt("int", None),
    "weights": {
        "depth": Opt("float", 1.0),
        "intensity": Opt("float", 1.0),
        "raydrop": Opt("float", 0.1),
        "reflectivity": Opt("float", 0.01),
        "laser": Opt("float", 0.0),
    },
    "effects": Opt("strs", ["distance", "incidence", "laser"]),
    "shutter": Opt("bool", True),
    "use_stored_cos": Opt("bool", False),
    "seed": Opt("int", 0),
}

RESETTABLE = ("laser", "distance", "incidence")


def _reset_params(p, keys, height):
    from .sensor_model import DistanceParams, IntensityParams
    for k in keys:
        if k == "laser":
            p = p.replace(laser_powers=np.ones(height))
        elif k == "distance":
            p = p.replace(distance=DistanceParams())
        elif k == "incidence":
            d = IntensityParams(laser_powers=np.ones(height))
            p = p.replace(incidence_a=d.incidence_a, incidence_b=d.incidence_b)
        else:
            raise ConfigError(f"reset: unknown component {k!r}; choose from {list(RESETTABLE)}")
    return p


def cmd_fit(args):
    path = args.config or os.path.join(DATA_DIR, "demo_fit.yaml")
    cfg = load_config(path, FIT_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    base = os.path.dirname(os.path.abspath(path))
    if args.data is not None:
        cfg["data"] = os.path.abspath(args.data)
    data = _resolve(base, cfg["data"])
    intr = fmt.read_intrinsics(os.path.join(data, "intrinsics.ini"))
    poses = [p for _, p in fmt.read_poses(os.path.join(data, "poses.txt"))]
    fld_path = _resolve(base, cfg["field"]) if cfg["field"] else os.path.join(data, "field.pblf")
    par_path = _resolve(base, cfg["init_params"]) if cfg["init_params"] else os.path.join(data, "params_truth.json")
    fld = fmt.load_field(fld_path)
    params = _reset_params(fmt.load_params(par_path), cfg["reset"], intr.height)
    range_paths = sorted(glob.glob(os.path.join(data, "frame_[0-9][0-9][0-9][0-9].npz")))
    if not range_paths:
        raise ConfigError(f"no frame_*.npz range images in {data}")
    idx = cfg["frames"] if cfg["frames"] is not None else list(range(len(range_paths)))
    obs = []
    for k in idx:
        if not 0 <= k < len(range_paths):
            raise ConfigError(f"frame index {k} out of range")
        img, cos = load_range(range_paths[k])
        p0 = poses[k]
        p1 = poses[k + 1] if k + 1 < len(poses) else poses[k]
        obs.append(Observation(img, p0, p1, cos if cfg["use_stored_cos"] else None))
    if not isinstance(cfg["group_lr"], dict):
        raise ConfigError("group_lr must be a mapping")
    opt = OptimizerConfig(lr=cfg["lr"], iterations=cfg["iterations"], lr_final_factor=cfg["lr_final_factor"],
                          group_lr={str(k): float(v) for k, v in cfg["group_lr"].items()},
                          seed=cfg["seed"], batch_rays=cfg["batch_rays"])
    fcfg = FitConfig(free=tuple(cfg["free"]), weights=LossWeights(**cfg["weights"]),
                     effects=_check_effects(cfg["effects"], "effects"), shutter=cfg["shutter"],
                     workers=_workers(args))
    res = fit(obs, intr, fld, params, opt=opt, config=fcfg)
    os.makedirs(args.out, exist_ok=True)
    fmt.save_field(os.path.join(args.out, "field.pblf"), res.field)
    fmt.save_params(os.path.join(args.out, "params.json"), res.params)
    res.history_csv(os.path.join(args.out, "history.csv"))
    with open(os.path.join(args.out, "offsets.csv"), "w") as fh:
        fh.write("frame,rx,ry,rz,tx,ty,tz\n")
        for k, off in zip(idx, res.offsets):
            fh.write(",".join([str(k)] + [repr(float(v)) for v in (*off.rotation, *off.translation)]) + "\n")
    report = {"best_iteration": res.best_iteration, "best_loss": res.best_loss}
    truth_path = os.path.join(data, "params_truth.json")
    if os.path.exists(truth_path):
        truth = fmt.load_params(truth_path)
        rel = np.abs(res.params.laser_powers / truth.laser_powers - 1.0)
        report["laser_max_rel_error"] = float(rel.max())
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    write_manifest(args.out, "fit", cfg, ([args.config] if args.config else []) + [fld_path, par_path] + [range_paths[k] for k in idx])


# ---------------------------------------------------------------------------
# resim / render-camera
# ---------------------------------------------------------------------------

def _effects_from_flags(args):
    eff = set(EFFECTS)
    if args.disable_distance:
        eff.discard("distance")
    if args.disable_laser:
        eff.discard("laser")
    if getattr(args, "disable_incidence", False):
        eff.discard("incidence")
    return frozenset(eff)


def cmd_resim(args):
    fld = fmt.load_field(args.field)
    params = fmt.load_params(args.params)
    intr = fmt.read_intrinsics(args.intrinsics)
    if args.width:
        intr = intr.replace(width=args.width)
    if args.reflect_scale is not None:
        if args.reflect_scale < 0:
            raise ConfigError("--reflect-scale must be non-negative")
        params = params.replace(reflect_scale=args.reflect_scale)
    if len(params.laser_powers) != intr.height:
        raise ConfigError("params laser powers do not match the intrinsics height")
    poses = [p for _, p in fmt.read_poses(args.poses)]
    if not poses:
        raise ConfigError(f"{args.poses}: no poses")
    effects = _effects_from_flags(args)
    os.makedirs(args.out, exist_ok=True)
    for k, p0 in enumerate(poses):
        p1 = poses[k + 1] if k + 1 < len(poses) else p0
        img, res = render_scan(fld, intr, p0, p1, params, shutter=not args.no_shutter, effects=effects,
                               workers=_workers(args))
        if not np.all(np.isfinite(res.intensity)):
            raise NumericError("non-finite intensity in resimulation")
        save_range_outputs(args.out, f"resim_{k:04d}", img, res.cos_incidence)
        fmt.write_kitti_bin(os.path.join(args.out, f"resim_{k:04d}.bin"), unproject(img, intr))
    write_manifest(args.out, "resim", vars_config(args), [args.field, args.params, args.intrinsics, args.poses])


def cmd_render_camera(args):
    fld = fmt.load_field(args.field)
    params = fmt.load_params(args.params) if args.params else None
    if params is not None and args.reflect_scale is not None:
        params = params.replace(reflect_scale=args.reflect_scale)
    pose = _pose_from_list(args.pose, "--pose")
    cam = Pinhole(args.fx, args.fy, args.cx if args.cx is not None else (args.width - 1) / 2,
                  args.cy if args.cy is not None else (args.height - 1) / 2, args.width, args.height)
    effects = _effects_from_flags(args) - {"laser"}
    res = render_camera(fld, cam, pose, params, effects=effects, workers=_workers(args))
    valid = (res.drop_prob < 0.5) & (res.depth > 0)
    img = RangeImage(np.where(valid, res.depth, 0.0), np.where(valid, np.clip(res.intensity, 0, 1), 0.0))
    os.makedirs(args.out, exist_ok=True)
    save_range_outputs(args.out, "camera", img, res.cos_incidence)
    fmt.write_gray_png(os.path.join(args.out, "camera_preview.png"), img.intensity, 0.0, 1.0)
    write_manifest(args.out, "render-camera", vars_config(args),
                   [args.field] + ([args.params] if args.params else []))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pblsim", description="Physically based LiDAR resimulation toolkit")
    ap.add_argument("--version", action="version", version=f"pblsim {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, helptext):
        p = sub.add_parser(name, help=helptext)
        p.set_defaults(func=func)
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker threads (default from ${WORKERS_ENV} or 1)")
        return p

    p = add("synth", cmd_synth, "synthesize scans and ground truth from a scene config")
    p.add_argument("--config", help="YAML scene config (defaults to the built-in courtyard)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = add("project", cmd_project, "point cloud -> range image")
    p.add_argument("--cloud", required=True, help=".bin (KITTI) or .npz")
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)

    p = add("unproject", cmd_unproject, "range image -> point cloud")
    p.add_argument("--range", required=True, help="range .npz or 16-bit depth PNG")
    p.add_argument("--intensity", help="intensity PNG when --range is a PNG")
    p.add_argument("--depth-scale", type=float, default=256.0)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True, help="output .bin or .npz")

    p = add("calibrate", cmd_calibrate, "recover intrinsics from raw frames")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("normals", cmd_normals, "normals and incidence from a range image")
    p.add_argument("--range", required=True)
    p.add_argument("--intensity")
    p.add_argument("--depth-scale", type=float, default=256.0)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--edge-threshold", type=float, default=0.1)
    p.add_argument("--artifact-threshold", type=float, default=10.0, help="degrees")
    p.add_argument("--incidence-threshold", type=float, default=85.0, help="degrees")
    p.add_argument("--out", required=True)

    p = add("analyze", cmd_analyze, "intensity statistics by distance and incidence")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("fit", cmd_fit, "fit field and sensor parameters to observations")
    p.add_argument("--config", help="YAML fit config (defaults to the built-in laser-power demo)")
    p.add_argument("--data", help="synth output directory (overrides the config)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = add("resim", cmd_resim, "render scans from a fitted field at given poses")
    p.add_argument("--field", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=None, help="override the number of columns")
    p.add_argument("--no-shutter", action="store_true")
    p.add_argument("--reflect-scale", type=float, default=None)
    p.add_argument("--disable-distance", action="store_true")
    p.add_argument("--disable-laser", action="store_true")
    p.add_argument("--disable-incidence", action="store_true")

    p = add("render-camera", cmd_render_camera, "pinhole view of a field")
    p.add_argument("--field", required=True)
    p.add_argument("--params")
    p.add_argument("--pose", type=float, nargs="+", required=True,
                   help="3 (translation), 7 (t + xyzw quaternion) or 12 (3x4) numbers, camera frame is OpenCV")
    p.add_argument("--fx", type=float, required=True)
    p.add_argument("--fy", type=float, required=True)
    p.add_argument("--cx", type=float, default=None)
    p.add_argument("--cy", type=float, default=None)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--reflect-scale", type=float, default=None)
    p.add_argument("--disable-distance", action="store_true")
    p.add_argument("--disable-laser", action="store_true")
    p.add_argument("--disable-incidence", action="store_true")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        if getattr(args, "workers", None) is not None and args.workers < 1:
            raise ConfigError("--workers must be positive")
        with np.errstate(over="ignore", under="ignore"):
            args.func(args)
    except (FitDiverged, CalibrationDiverged, NumericError, FloatingPointError) as exc:
        print(f"pblsim {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"pblsim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
