"""Command-line entry point: ``qrbs <subcommand> --config PATH [--seed N] [--set key=value ...] [--out DIR]``.

Output layout under ``--out``::

    meshes/        ground-truth frames (synth), deformed / extracted / predicted OBJs
    checkpoints/   fit.zip and loss.csv
    metrics/       metrics.json, metrics.csv, frames.csv
    diag/          renders, opacity maps, assignment diagnostics, divergence dumps

Exit status: 0 success, 2 config or usage error, 3 invariant violation,
4 divergence abort.  Failures print one ``key=value`` line to stderr.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import benchmark as bm
from .dualquat import DegenerateBlendError, InvalidTransformError
from .field import PinholeCamera, RenderConfig, SDFGrid, extract_mesh, render_image, write_opacity_map, write_ppm
from .fitting import (
    ConfigError,
    FitConfig,
    FitDivergenceError,
    FrameObservation,
    NonFiniteGradientError,
    fit,
    history_csv,
    load_checkpoint,
    parse_value,
    refresh_assignments,
    save_checkpoint,
)
from .mesh import MeshError, TriangleMesh, read_pcd, sample_points_uniform, save_mesh
from .skinning import qrbs_inverse

SUBCOMMANDS = ("synth", "fit", "deform", "render", "extract-mesh", "eval", "assign-debug")

DEFAULTS = {
    "seed": 0,
    "synth": {"n_frames": 20, "max_angle_deg": 60.0, "mirrored": False, "n_points": 2000},
    "fit": FitConfig().to_dict(),
    "deform": {"frame": 0, "resolution": 128},
    "render": {"frame": 0, "width": 64, "height": 48, "focal": 60.0, "distance": 3.0,
               "near": 1.0, "far": 5.0, "n_samples": 64, "beta": 1e-3},
    "extract": {"resolution": 128, "iso": 0.0, "sdf": None},
    "eval": {"n_points": 10000, "resolution": 128},
    "assign": {"n_points": 2000},
    "paths": {"sequence": None, "checkpoint": None},
}


class CliError(Exception):
    def __init__(self, code: int, kind: str, msg: str):
        super().__init__(msg)
        self.code, self.kind = code, kind


def override_keys() -> list:
    keys = ["seed"]
    for section, body in DEFAULTS.items():
        if section == "seed":
            continue
        if section == "fit":
            keys += [f"fit.{k}" for k in FitConfig.override_keys()]
        else:
            keys += [f"{section}.{k}" for k in body]
    return keys


def _merge(base: dict, new: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in new.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and not (where == "" and k == "fit"):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        elif where == "" and k == "fit":
            out[k] = FitConfig.from_dict(v).to_dict()
        else:
            out[k] = v
    return out


def load_config(path, seed=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    allowed = set(override_keys())
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        if key not in allowed:
            raise ConfigError(f"unknown override key {key!r}")
        if key.startswith("fit."):
            cfg["fit"] = FitConfig.from_dict(cfg["fit"]).with_overrides([(key[4:], value)]).to_dict()
        else:
            parts = key.split(".")
            cur = cfg
            for p in parts[:-1]:
                cur = cur[p]
            cur[parts[-1]] = parse_value(value)
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg["fit"]["seed"] = int(cfg["seed"])
    cfg["fit"] = FitConfig.from_dict(cfg["fit"]).to_dict()
    return cfg


def _paths(cfg, out: Path) -> dict:
    seq = Path(cfg["paths"]["sequence"]) if cfg["paths"]["sequence"] else out
    ckpt = Path(cfg["paths"]["checkpoint"]) if cfg["paths"]["checkpoint"] else out / "checkpoints" / "fit.zip"
    return {"sequence": seq, "checkpoint": ckpt}


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(2, "MissingInput", f"{what} not found: {path}")
    return path


def _observations(seq_dir: Path) -> list:
    files = sorted((seq_dir / "meshes").glob("frame_*.pcd"))
    if not files:
        raise CliError(2, "MissingInput", f"no frame_*.pcd clouds under {seq_dir / 'meshes'}")
    return [FrameObservation(t, read_pcd(f)) for t, f in enumerate(files)]


def _frame(state, t: int) -> int:
    if not 0 <= t < state.n_frames:
        raise CliError(3, "FrameIndexError", f"frame {t} outside 0..{state.n_frames - 1}")
    return t


def cmd_synth(cfg, out: Path):
    s = cfg["synth"]
    spec = bm.hinge_spec(int(s["n_frames"]), float(s["max_angle_deg"]), bool(s["mirrored"]))
    seq = bm.generate_sequence(spec, cfg["seed"], int(s["n_points"]))
    bm.save_sequence(seq, out)


def cmd_fit(cfg, out: Path):
    p = _paths(cfg, out)
    obs = _observations(_need(p["sequence"], "sequence directory"))
    fc = FitConfig.from_dict(cfg["fit"])
    try:
        state = fit(obs, fc)
    except FitDivergenceError as e:
        save_checkpoint(e.state, fc, out / "diag" / "divergence.zip")
        raise
    save_checkpoint(state, fc, p["checkpoint"])
    (p["checkpoint"].parent / "loss.csv").write_text(history_csv(state.history))


def cmd_deform(cfg, out: Path):
    state, _ = load_checkpoint(_need(_paths(cfg, out)["checkpoint"], "checkpoint"))
    t = _frame(state, int(cfg["deform"]["frame"]))
    m = state.canonical_mesh(int(cfg["deform"]["resolution"]))
    if m.n_faces == 0:
        raise CliError(3, "EmptyMeshError", "canonical surface is empty")
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    save_mesh(TriangleMesh(state.deform_points(m.vertices, t), m.faces), out / "meshes" / f"deformed_{t:04d}.obj",
              comment=f"seed {cfg['seed']} frame {t}")


def _look_at(eye, target) -> np.ndarray:
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.hstack([np.stack([x, y, z], axis=1), eye[:, None]])


def cmd_render(cfg, out: Path):
    r = cfg["render"]
    state, _ = load_checkpoint(_need(_paths(cfg, out)["checkpoint"], "checkpoint"))
    t = _frame(state, int(r["frame"]))
    target = state.norm_center
    eye = target + float(r["distance"]) * np.array([0.0, -1.0, 0.5]) / np.sqrt(1.25)
    cam = PinholeCamera(int(r["width"]), int(r["height"]), float(r["focal"]), _look_at(eye, target))
    pose = state.poses[t]

    def to_canonical(points):
        return qrbs_inverse(state.to_canonical(points), state.bones, state.delta, state.gamma, pose, state.blend)

    rc = RenderConfig(n_samples=int(r["n_samples"]), beta=float(r["beta"]), stratified=True, seed=cfg["seed"])
    rgb, op = render_image(state.sdf, state.color, cam, rc, float(r["near"]), float(r["far"]), to_canonical)
    (out / "diag").mkdir(parents=True, exist_ok=True)
    write_ppm(out / "diag" / f"render_{t:04d}.ppm", rgb, comment=f"seed {cfg['seed']} frame {t}")
    write_opacity_map(out / "diag" / f"opacity_{t:04d}.bin", op)


def cmd_extract(cfg, out: Path):
    e = cfg["extract"]
    if e["sdf"]:
        grid = SDFGrid.load(_need(Path(e["sdf"]), "SDF grid"))
        to_world = None
    else:
        state, _ = load_checkpoint(_need(_paths(cfg, out)["checkpoint"], "checkpoint"))
        grid, to_world = state.sdf, state.to_world
    res = int(e["resolution"])
    if tuple(grid.resolution) != (res,) * 3:
        grid = SDFGrid.from_function(grid, grid.lo, grid.hi, res)
    m = extract_mesh(grid, float(e["iso"]))
    if to_world is not None:
        m = TriangleMesh(to_world(m.vertices), m.faces)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    save_mesh(m, out / "meshes" / "canonical.obj", comment=f"seed {cfg['seed']}")


def cmd_eval(cfg, out: Path):
    p = _paths(cfg, out)
    state, _ = load_checkpoint(_need(p["checkpoint"], "checkpoint"))
    gt_meshes, _, gt = bm.load_sequence(_need(p["sequence"], "sequence directory"))
    if len(gt_meshes) != state.n_frames:
        raise CliError(3, "FrameCountMismatch", f"checkpoint has {state.n_frames} frames, sequence {len(gt_meshes)}")
    n, seed = int(cfg["eval"]["n_points"]), int(cfg["seed"])
    preds = state.frame_meshes(int(cfg["eval"]["resolution"]))
    if preds[0].n_faces == 0:
        raise CliError(3, "EmptyMeshError", "canonical surface is empty")
    rows = []
    for t, (pm, gm) in enumerate(zip(preds, gt_meshes)):
        rec = bm.evaluate(pm, gm, seed, n)
        rows.append((t, rec.cd, rec.f10, rec.f5, bm.normalized_rms_chamfer(pm, gm, seed, n)))
    angles = np.degrees(bm.hinge_angles(state.poses)) if state.bones.n_bones >= 2 else None
    truth = np.degrees(np.asarray([f["angle"] for f in gt["frames"]]))
    extra = {"frames": len(rows), "final_rms_chamfer": rows[-1][4]}
    if angles is not None:
        extra["median_angle_error_deg"] = float(np.median(np.abs(angles - truth)))
    arr = np.asarray([r[1:4] for r in rows])
    rec = bm.MetricsRecord(float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean()), seed, n,
                           extra=extra)
    rec.save(out / "metrics")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "cd", "f10", "f5", "rms_chamfer", "angle_deg", "true_angle_deg"])
    for t, cd, f10, f5, rms in rows:
        a = repr(float(angles[t])) if angles is not None else ""
        w.writerow([t, repr(cd), repr(f10), repr(f5), repr(rms), a, repr(float(truth[t]))])
    (out / "metrics" / "frames.csv").write_text(buf.getvalue())


def cmd_assign(cfg, out: Path):
    state, fc = load_checkpoint(_need(_paths(cfg, out)["checkpoint"], "checkpoint"))
    refresh_assignments(state, fc)
    if state.mesh is None:
        raise CliError(3, "EmptyMeshError", "canonical surface is empty")
    from .skinning import assign_points

    pts = sample_points_uniform(state.mesh, int(cfg["assign"]["n_points"]), int(cfg["seed"])).points
    res = assign_points(state.mesh, state.assign_bones, pts, fc.eta, fc.zeta, state.geo)
    (out / "diag").mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "diag" / "assignments.csv")


COMMANDS = {
    "synth": (cmd_synth, "write a synthetic hinge sequence (meshes, clouds, ground-truth poses)"),
    "fit": (cmd_fit, "fit rig, poses, weights and shape to a sequence; writes a checkpoint and loss CSV"),
    "deform": (cmd_deform, "deform the canonical mesh to one frame of a checkpoint"),
    "render": (cmd_render, "volume-render one frame of a checkpoint to PPM plus an opacity map"),
    "extract-mesh": (cmd_extract, "marching-cubes mesh from an SDF grid or a checkpoint"),
    "eval": (cmd_eval, "Chamfer, F-score and hinge-angle metrics against the ground truth"),
    "assign-debug": (cmd_assign, "write per-point geodesic assignment diagnostics"),
}


def build_parser() -> argparse.ArgumentParser:
    keys = "override keys (--set key=value):\n  " + "\n  ".join(override_keys())
    parser = argparse.ArgumentParser(prog="qrbs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="subcommand", required=True)
    for name, (_, text) in COMMANDS.items():
        sp = sub.add_parser(name, help=text, description=text, epilog=keys,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", help="JSON config file (sections: " + ", ".join(k for k in DEFAULTS if k != "seed") + ")")
        sp.add_argument("--seed", type=int, help="overrides the config seed; every output records it")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("--out", default=".", help="output directory (default: current directory)")
    return parser


def _fail(code: int, kind: str, msg: str) -> int:
    text = " ".join(str(msg).split())
    print(f"error code={code} type={kind} message={json.dumps(text)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.seed, args.set)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](cfg, out)
    except CliError as e:
        return _fail(e.code, e.kind, e)
    except ConfigError as e:
        return _fail(2, "ConfigError", e)
    except FitDivergenceError as e:
        return _fail(4, "FitDivergenceError", e)
    except (InvalidTransformError, DegenerateBlendError, NonFiniteGradientError, MeshError, ValueError) as e:
        return _fail(3, type(e).__name__, e)
    except OSError as e:
        return _fail(2, type(e).__name__, e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
