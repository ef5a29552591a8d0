"""Command-line interface: ``posecalib {synth,calibrate,pair,eval,convert}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import io
from .config import PipelineConfig, load_config
from .exceptions import CalibrationError, ConfigError

log = logging.getLogger("posecalib")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CODES = {
    "config": 2,
    "input": 3,
    "registration": 4,
    "integration": 5,
    "bundle": 6,
    "eval": 7,
    "synth": 8,
}


def exit_code_for(exc):
    return EXIT_CODES.get(getattr(exc, "stage", "core"), EXIT_ERROR)


def _floats(text):
    return tuple(float(x) for x in text.split(",")) if text else None


def _hide(items):
    out = []
    for it in items or []:
        try:
            c, p = it.split(":")
            out.append((int(c), int(p)))
        except ValueError:
            raise ConfigError(f"--hide expects CAMERA:PERSON, got {it!r}") from None
    return out


def cmd_synth(args):
    from .synth import SceneSpec, generate
    vis = None
    hidden = _hide(args.hide)
    if hidden:
        vis = np.ones((args.cameras, args.people), dtype=bool)
        for c, p in hidden:
            if not (0 <= c < args.cameras and 0 <= p < args.people):
                raise ConfigError(f"--hide {c}:{p} is outside the scene")
            vis[c, p] = False
        vis = tuple(map(tuple, vis.tolist()))
    spec = SceneSpec(n_cameras=args.cameras, n_people=args.people, n_frames=args.frames,
                     offsets=_floats(args.offsets), sigma=args.sigma, motion=args.motion,
                     dropout=args.dropout, visibility=vis, seed=args.seed)
    scene = generate(spec)
    io.write_scene(args.out, scene.views, scene.truth)
    print(f"wrote {args.cameras} cameras to {args.out}")
    return EXIT_OK


def _config_from(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.workers is not None:
        kw["workers"] = args.workers
    if getattr(args, "no_sync", False):
        kw["sync"] = False
    if getattr(args, "no_ransac", False):
        kw["ransac"] = False
    if getattr(args, "stop_after", None):
        kw["stop_after"] = args.stop_after
    return cfg.with_(**kw) if kw else cfg


def _load_truth(args, scene_truth):
    if getattr(args, "gt", None):
        return io.load_ground_truth(args.gt)
    return scene_truth


def cmd_calibrate(args):
    from .pipeline import run_pipeline
    cfg = _config_from(args)
    views, truth = io.load_scene(args.scene)
    truth = _load_truth(args, truth)
    inter = None
    if args.keep_intermediates:
        inter = os.path.join(os.path.dirname(os.path.abspath(args.out)), "intermediates")
    try:
        result = run_pipeline(cfg, views, truth, intermediates=inter)
    except CalibrationError as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None:
            io.write_result(args.out, partial)
            log.error("partial result written to %s", args.out)
        raise
    io.write_result(args.out, result)
    for name, summ in result.stage_summaries().items():
        parts = [f"{k}={v:.6g}" for k, v in summ.items() if isinstance(v, float)]
        print(f"{name}: " + " ".join(parts))
    return EXIT_OK


def cmd_pair(args):
    from .pairwise import register_pair
    cfg = _config_from(args)
    views, _ = io.load_scene(args.scene)
    n = len(views)
    if not (0 <= args.source < n and 0 <= args.target < n) or args.source == args.target:
        raise ConfigError("source and target must be two different existing cameras")
    edge = register_pair(views[args.source], views[args.target], cfg.registration_options(),
                         sync=cfg.sync, ransac=cfg.ransac, offset=args.offset)
    out = {"source": edge.source, "target": edge.target,
           "rotation": edge.rotation, "translation": edge.translation, "offset": edge.offset,
           "score": edge.score, "matches": [list(m) for m in edge.matches()]}
    text = io.dumps(out, indent=2)
    if args.out:
        io._write_text(args.out, text + "\n")
    print(text)
    return EXIT_OK


def cmd_eval(args):
    from .metrics import (association_precision, offset_error, rotation_error,
                          translation_error)
    try:
        poses, offsets, assoc, _ = io.load_result(args.result)
        truth = io.load_ground_truth(args.gt)
        pr = association_precision(assoc, labels=truth.labels)
        report = {"E_R": rotation_error(poses, truth.poses),
                  "E_t": translation_error(poses, truth.poses),
                  "E_delta": offset_error(offsets, truth.offsets),
                  "P": pr.precision, "P_undefined": pr.undefined}
    except CalibrationError as exc:
        exc.stage = "eval"
        raise
    text = io.dumps(report, indent=2)
    if args.out:
        io._write_text(args.out, text + "\n")
    print(text)
    return EXIT_OK


def cmd_convert(args):
    from .pose_encoding import H36M_17, Skeleton
    skel = H36M_17
    if args.skeleton:
        import json
        with open(args.skeleton) as fh:
            skel = Skeleton.from_dict(json.load(fh))
    fmt = args.format or os.path.splitext(args.input)[1].lstrip(".")
    if fmt == "csv":
        tracks = io.convert_csv(args.input, skel)
    elif fmt == "npz":
        tracks = io.convert_npz(args.input, skel)
    elif fmt == "jsonl":
        _, skel, tracks, _ = io.load_tracks(args.input)
    else:
        raise ConfigError(f"unknown input format {fmt!r}")
    io.write_tracks(args.out, args.camera_id, skel, tracks, args.fps)
    print(f"wrote {len(tracks)} track segments to {args.out}")
    return EXIT_OK


def _add_pipeline_flags(p, stages=True):
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--workers", type=int,
                   help="worker processes (default: $POSECALIB_WORKERS or 1)")
    p.add_argument("--no-sync", action="store_true", help="skip the offset search")
    p.add_argument("--no-ransac", action="store_true", help="register all persons at once")
    if stages:
        p.add_argument("--stop-after", choices=["pr", "mi", "ba"],
                       help="stop after pairwise registration, integration or one BA")
        p.add_argument("--keep-intermediates", action="store_true",
                       help="write every stage's result next to the output")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="posecalib",
        description="Multi-camera calibration from 3D human pose tracks.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--people", type=int, default=3)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--sigma", type=float, default=0.0, help="pixel noise std")
    p.add_argument("--offsets", help="comma-separated per-camera offsets, first must be 0")
    p.add_argument("--motion", choices=["articulated", "linear", "static"], default="articulated")
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--hide", action="append", metavar="CAM:PERSON",
                   help="hide a person from a camera (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="run the full pipeline")
    p.add_argument("scene", help="directory with camera_*.jsonl and intrinsics.json")
    p.add_argument("--out", required=True, help="result JSON path")
    p.add_argument("--gt", help="ground-truth file for per-stage metrics")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("pair", help="register a single camera pair")
    p.add_argument("scene")
    p.add_argument("--source", type=int, default=0)
    p.add_argument("--target", type=int, default=1)
    p.add_argument("--offset", type=int, default=0, help="known offset with --no-sync")
    p.add_argument("--out")
    _add_pipeline_flags(p, stages=False)
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("eval", help="score a result file against ground truth")
    p.add_argument("result")
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="convert pose-estimator output to a track file")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["csv", "npz", "jsonl"])
    p.add_argument("--camera-id", type=int, default=0)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--skeleton", help="JSON file with names and parents (default: H36M 17)")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CalibrationError as exc:
        print(f"error [{getattr(exc, 'stage', 'core')}]: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"error [input]: {exc}", file=sys.stderr)
        return EXIT_CODES["input"]


if __name__ == "__main__":
    sys.exit(main())
