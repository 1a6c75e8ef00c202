"""Command-line entry point: synth, calibrate, refine, evaluate, config.

Exit codes: 0 success, 1 invalid input, 2 optimization aborted.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import io as sio
from .body import BodyTemplate, make_synthetic_template
from .calib import CalibrationInput, coarse_calibration_imu, coarse_calibration_lidar, estimate_calibration_input
from .config import PipelineConfig
from .core import CloudLabel, CoordinateFrame, ScenefitError, ValidationError
from .metrics import evaluate
from .optimize import OptimizationAborted, refine_sequence
from .synth import generate

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 1, 2
MANIFEST = "manifest.json"


class InputError(Exception):
    """Invalid user input; the message names the file and, when known, the field."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _append_manifest(directory: Path, entry: dict) -> None:
    """Append one run record; timestamps live only here."""
    path = directory / MANIFEST
    runs = []
    if path.exists():
        try:
            runs = json.loads(path.read_text(encoding="utf-8")).get("runs", [])
        except (json.JSONDecodeError, AttributeError):
            runs = []
    runs.append(entry)
    _write(path, _dump_json({"runs": runs}))


def _run_entry(command, args, cfg, inputs, outputs, exit_code, t0, started):
    return {
        "command": command,
        "argv": [str(a) for a in args.argv],
        "version": __version__,
        "config": cfg.to_dict(),
        "threads": args.threads,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs if Path(p).is_file()},
        "exit_code": exit_code,
        "started": started,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }


def _load(kind, path, loader):
    p = Path(path)
    if not p.exists():
        raise InputError(f"{kind} file not found: {p}")
    try:
        return loader(p)
    except sio.ParseError as e:
        raise InputError(f"{p}: {e}") from None
    except (ValidationError, ValueError, KeyError, TypeError) as e:
        raise InputError(f"{p}: {e}") from None


def _template(cfg: PipelineConfig, path=None) -> BodyTemplate:
    if path:
        return _load("template", path, BodyTemplate.load)
    return make_synthetic_template(cfg.body.n_vertices, cfg.body.seed)


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config:
        cfg = _load("config", args.config, PipelineConfig.load)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.synth.seed = args.seed
    return cfg


def _load_trajectory(path: Path) -> np.ndarray:
    doc = sio.load_json(path)
    if not isinstance(doc, dict) or "positions" not in doc:
        raise sio.ParseError("missing field", field="positions")
    if doc.get("frame", "WORLD") != "WORLD":
        raise sio.ParseError(f"trajectory frame must be WORLD, got {doc.get('frame')}", field="frame")
    pos = np.asarray(doc["positions"], dtype=float)
    if pos.ndim != 2 or pos.shape[1] != 3 or not np.all(np.isfinite(pos)):
        raise sio.ParseError("positions must be a finite N x 3 array", field="positions")
    return pos


def cloud_name(k: int) -> str:
    return f"frame_{k:05d}.ply"


# ----------------------------------------------------------------------------------
# subcommands


def run_synth(args, cfg: PipelineConfig) -> tuple[int, list, list]:
    out = Path(args.out)
    if args.wall:
        cfg.synth.wall = args.wall
    if args.frames:
        cfg.synth.n_frames = args.frames
    cfg.synth.__post_init__()
    tpl = _template(cfg)
    data = generate(cfg.synth, tpl)
    outputs = [out / "scene.ply", out / "motion_gt.json", out / "motion_init.json",
               out / "lidar_trajectory.json", out / "template.json"]
    _write(out / "scene.ply", sio.dumps_mesh(data.scene))
    _write(out / "motion_gt.json", sio.dumps_motion(data.motion))
    _write(out / "motion_init.json", sio.dumps_motion(data.initial))
    _write(out / "lidar_trajectory.json", _dump_json({"frame": "WORLD", "positions": data.lidar_trajectory.tolist()}))
    _write(out / "template.json", _dump_json(tpl.to_dict()))
    for k, c in enumerate(data.clouds):
        p = out / "clouds" / cloud_name(k)
        _write(p, sio.dumps_cloud(c))
        outputs.append(p)
    print(f"synth: {len(data.clouds)} frames, {len(data.scene.vertices)} scene vertices -> {out}")
    return EXIT_OK, [], outputs


def run_calibrate(args, cfg: PipelineConfig) -> tuple[int, list, list]:
    if args.normals:
        inputs = [args.normals]

        def read(p):
            d = sio.load_json(p)
            for key in ("ground_normal", "plane_normal", "lidar_height"):
                if key not in d:
                    raise sio.ParseError("missing field", field=key)
            return CalibrationInput(d["ground_normal"], d["plane_normal"], d["lidar_height"])

        inp = _load("normals", args.normals, read)
    else:
        inputs = [args.ply]
        cloud = _load("scan", args.ply, sio.load_cloud)
        try:
            inp = estimate_calibration_input(cloud.points, cfg.calib.ransac_threshold, cfg.calib.ransac_iterations, cfg.seed)
        except ValidationError as e:
            raise InputError(f"{args.ply}: {e}") from None
    cal = coarse_calibration_lidar(inp, cfg.calib.forward_offset)
    doc = {
        "input": {"ground_normal": inp.ground_normal.tolist(), "plane_normal": inp.plane_normal.tolist(),
                  "lidar_height": inp.lidar_height},
        "lidar_to_world": sio.transform_to_dict(cal.transform),
        "orthonormality_deviation": cal.deviation,
        "imu_to_world": sio.transform_to_dict(coarse_calibration_imu()),
    }
    out = Path(args.out)
    _write(out, _dump_json(doc))
    print(f"calibrate: deviation {cal.deviation:.3e} -> {out}")
    return EXIT_OK, inputs, [out]


def run_refine(args, cfg: PipelineConfig) -> tuple[int, list, list]:
    out = Path(args.out)
    motion = _load("motion", args.motion, sio.load_motion)
    if motion.frame != CoordinateFrame.WORLD:
        raise InputError(f"{args.motion}: field 'frame' must be WORLD, got {motion.frame.value}")
    scene = _load("scene", args.scene, sio.load_mesh)
    traj = _load("lidar trajectory", args.lidar, _load_trajectory)
    if len(traj) != len(motion):
        raise InputError(f"{args.lidar}: field 'positions' has {len(traj)} rows, motion has {len(motion)} frames")
    tpl = _template(cfg, args.template)
    cloud_dir = Path(args.clouds)
    inputs = [args.motion, args.scene, args.lidar] + ([args.template] if args.template else [])
    clouds = []
    for k in range(len(motion)):
        p = cloud_dir / cloud_name(k)
        c = _load("cloud", p, sio.load_cloud)
        if c.frame != CoordinateFrame.WORLD:
            raise InputError(f"{p}: field 'frame' must be WORLD, got {c.frame.value}")
        if c.label != CloudLabel.HUMAN:
            raise InputError(f"{p}: field 'label' must be HUMAN, got {c.label.value}")
        clouds.append(c)
        inputs.append(p)
    outputs = [out / "refined_motion.json", out / "report.json"]
    try:
        refined, report = refine_sequence(motion, clouds, scene, traj, tpl, cfg.optimizer, cfg.losses)
        code = EXIT_OK
    except OptimizationAborted as e:
        refined, report, code = e.motion, e.report, EXIT_ABORT
        print(f"refine: aborted: {e}", file=sys.stderr)
    _write(out / "refined_motion.json", sio.dumps_motion(refined))
    _write(out / "report.json", _dump_json(report.to_dict()))
    if code == EXIT_OK:
        hist = report.total_history
        print(f"refine: {len(hist)} iterations, loss {hist[0]:.6g} -> {min(hist):.6g}" if hist else "refine: nothing to optimise")
    return code, inputs, outputs


def run_evaluate(args, cfg: PipelineConfig) -> tuple[int, list, list]:
    pred = _load("prediction", args.pred, sio.load_motion)
    gt = _load("ground truth", args.gt, sio.load_motion)
    if len(pred) != len(gt):
        raise InputError(f"{args.pred}: field 'T' has {len(pred)} frames, ground truth has {len(gt)}")
    tpl = _template(cfg, args.template)
    res, detail = evaluate(pred, gt, tpl, cfg.metrics.segment_length, cfg.metrics.pck_threshold)
    doc = {"result": res.to_dict(), "detail": detail}
    outputs = []
    if args.report:
        _write(Path(args.report), _dump_json(doc))
        outputs.append(Path(args.report))
    if args.csv:
        p = Path(args.csv)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            row = res.to_dict()
            w.writerow(list(row))
            w.writerow([repr(v) for v in row.values()])
        outputs.append(p)
    print(json.dumps(res.to_dict(), sort_keys=True))
    return EXIT_OK, [args.pred, args.gt], outputs


def run_config(args, cfg: PipelineConfig) -> tuple[int, list, list]:
    if args.dump:
        sys.stdout.write(cfg.dumps())
        return EXIT_OK, [], []
    if args.check == "-":
        text = sys.stdin.read()
        src = "<stdin>"
    else:
        src = args.check
        if not Path(src).exists():
            raise InputError(f"config file not found: {src}")
        text = Path(src).read_text(encoding="utf-8")
    try:
        checked = PipelineConfig.loads(text)
    except (ValidationError, TypeError) as e:
        raise InputError(f"{src}: {e}") from None
    if PipelineConfig.loads(checked.dumps()).to_dict() != checked.to_dict():
        raise InputError(f"{src}: config does not round-trip")
    print("config: ok")
    return EXIT_OK, [], []


# ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scenefit", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1, help="cap on BLAS/OpenMP worker threads")
    ap.add_argument("--seed", type=int, default=None, help="override the pipeline and synth seed")
    ap.add_argument("--config", default=None, help="pipeline config JSON (see `config --dump`)")
    ap.add_argument("--version", action="version", version=f"scenefit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic climbing sequence")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--wall", choices=["VERTICAL", "HORIZONTAL", "OVERHANG"], default=None)
    p.add_argument("--frames", type=int, default=None)

    p = sub.add_parser("calibrate", help="coarse LiDAR->world calibration")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--normals", help="JSON with ground_normal, plane_normal, lidar_height")
    g.add_argument("--ply", help="LiDAR-frame scan containing the ground and a wall")
    p.add_argument("--out", required=True, help="output calibration JSON")

    p = sub.add_parser("refine", help="refine a motion against clouds and a scene")
    p.add_argument("--motion", required=True)
    p.add_argument("--clouds", required=True, help="directory of frame_NNNNN.ply human clouds")
    p.add_argument("--scene", required=True)
    p.add_argument("--lidar", required=True, help="LiDAR trajectory JSON")
    p.add_argument("--template", default=None, help="body template JSON (default: synthetic template)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("evaluate", help="compare a predicted motion with ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--template", default=None)
    p.add_argument("--report", default=None, help="write result and per-segment detail JSON")
    p.add_argument("--csv", default=None, help="write a one-row CSV of the metrics")

    p = sub.add_parser("config", help="print or validate the pipeline configuration")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--dump", action="store_true", help="print the effective configuration")
    g.add_argument("--check", metavar="FILE", help="validate a config file ('-' for stdin)")
    return ap


COMMANDS = {
    "synth": run_synth,
    "calibrate": run_calibrate,
    "refine": run_refine,
    "evaluate": run_evaluate,
    "config": run_config,
}


def _manifest_dir(args) -> Path | None:
    if args.command in ("synth", "refine"):
        return Path(args.out)
    if args.command == "calibrate":
        return Path(args.out).parent
    if args.command == "evaluate" and args.report:
        return Path(args.report).parent
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        cfg = _load_config(args)
        with threadpool_limits(limits=args.threads):
            code, inputs, outputs = COMMANDS[args.command](args, cfg)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ScenefitError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    mdir = _manifest_dir(args)
    if mdir is not None:
        _append_manifest(mdir, _run_entry(args.command, args, cfg, inputs, outputs, code, t0, started))
    return code


if __name__ == "__main__":
    sys.exit(main())
