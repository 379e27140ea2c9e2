"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 invalid input or unwritable path,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._validation import NumericalError, ValidationError
from .fit import FREE_MASS, fit_gaussians
from .formats import (
    read_grid,
    weights_from_json,
    write_export_csv,
    write_gaussians,
    write_grid,
    write_loss_csv,
    write_metrics_csv,
)
from .fusion import evaluate_global, save_state
from .objectives import iou_miou
from .pipeline import LOCAL_DIMS, PredictConfig, evaluate_local, explore, make_weights, predict_local
from .splat import num_threads
from .worldgen import SceneSpec, generate_scene, render_feature_pyramid, trajectory, trajectory_from_json, trajectory_to_json

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("gaussocc")


def positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def dims(text):
    parts = str(text).lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"dims must look like 60x60x36, got {text}")
    return tuple(positive_int(p) for p in parts)


def _predict_options(p):
    p.add_argument("--weights", default="zero", help="'zero', 'random' or a weight JSON file")
    p.add_argument("--gaussians", type=positive_int, default=16200)
    p.add_argument("--smax", type=positive_float, default=0.08)
    p.add_argument("--c-feat", type=positive_int, default=96)
    p.add_argument("--levels", type=positive_int, default=3)
    p.add_argument("--rounds", type=positive_int, default=3)
    p.add_argument("--scales", type=positive_int, default=2)
    p.add_argument("--local-dims", type=dims, default=LOCAL_DIMS)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; command-line flags win")
    common.add_argument("--seed", type=nonneg_int, default=0)
    common.add_argument("--threads", type=positive_int, default=None)
    common.add_argument("--export-csv", metavar="PATH", help="also dump the output grid as x,y,z,label rows")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gaussocc", description="Semantic occupancy with 3D Gaussians.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic room and trajectory")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=dims, default=(60, 60, 36))
    p.add_argument("--voxel-size", type=positive_float, default=0.08)
    p.add_argument("--frames", type=positive_int, default=30)

    p = sub.add_parser("fit", parents=[common], help="fit Gaussians to a ground-truth grid")
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gaussians", type=positive_int, default=16200)
    p.add_argument("--smax", type=positive_float, default=0.08)
    p.add_argument("--steps", type=nonneg_int, default=2000)
    p.add_argument("--lr", type=positive_float, default=1e-2)
    p.add_argument("--free-mass", type=positive_float, default=FREE_MASS)
    p.add_argument("--init", choices=("occupied", "uniform"), default="occupied")

    p = sub.add_parser("predict", parents=[common], help="local prediction for one frame")
    p.add_argument("--scene", required=True)
    p.add_argument("--frame", type=nonneg_int, required=True)
    p.add_argument("--out", required=True)
    _predict_options(p)

    p = sub.add_parser("explore", parents=[common], help="fuse local predictions over the trajectory")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("splice", "confidence"), default="splice")
    p.add_argument("--frames", type=positive_int, default=None, help="use only the first N frames")
    _predict_options(p)

    p = sub.add_parser("eval", parents=[common], help="IoU and mIoU of one grid against another")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", help="OCCG grid whose nonzero voxels are evaluated")
    p.add_argument("--out", help="metrics CSV path")
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(config, dict):
            parser.error("config must be a JSON object")
        # re-parse with the file as defaults so explicit flags still win
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, value in config.items():
            dest = key.replace("-", "_")
            if dest not in known:
                parser.error(f"unknown config key {key!r} for {args.command}")
            action = known[dest]
            if action.type is not None and value is not None:
                try:
                    value = action.type(value if not isinstance(value, list) else "x".join(map(str, value)))
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    parser.error(f"config key {key!r}: {exc}")
            defaults[dest] = value
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _out_dir(path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _print_metrics(m):
    for metric, cls, value in m.rows():
        print(f"{metric},{cls},{float(value)!r}")


def _load_scene(directory):
    d = Path(directory)
    gt = read_grid(d / "scene.occg")
    cams = trajectory_from_json((d / "trajectory.json").read_text())
    return gt, cams


def _predict_config(args):
    return PredictConfig(n_gaussians=args.gaussians, s_max=args.smax, c_feat=args.c_feat, levels=args.levels,
                         rounds=args.rounds, num_scales=args.scales, local_dims=tuple(args.local_dims), seed=args.seed)


def _weights(args, config):
    if args.weights in ("zero", "random"):
        return make_weights(args.weights, config)
    return make_weights(weights_from_json(Path(args.weights).read_text()), config)


def cmd_gen(args):
    out = _out_dir(args.out)
    spec = SceneSpec(seed=args.seed, dims=args.dims, voxel_size=args.voxel_size)
    gt = generate_scene(spec)
    cams = trajectory(gt.box, frames=args.frames, seed=args.seed)
    write_grid(out / "scene.occg", gt)
    (out / "spec.json").write_text(spec.to_json())
    (out / "trajectory.json").write_text(trajectory_to_json(cams))
    if args.export_csv:
        write_export_csv(args.export_csv, gt)
    print(f"wrote {out} ({'x'.join(map(str, gt.dims))}, {len(cams)} frames)")


def cmd_fit(args):
    gt = read_grid(args.gt)
    out = _out_dir(args.out)
    res = fit_gaussians(gt, args.gaussians, args.smax, args.steps, lr=args.lr, free_mass=args.free_mass,
                        seed=args.seed, init=args.init, threads=args.threads)
    metrics = iou_miou(res.prediction, gt)
    write_gaussians(out / "gaussians.json", res.anchors, args.smax, gt.box)
    write_loss_csv(out / "losses.csv", res.curve)
    write_metrics_csv(out / "metrics.csv", metrics)
    write_grid(out / "pred.occg", res.prediction)
    if args.export_csv:
        write_export_csv(args.export_csv, res.prediction)
    _print_metrics(metrics)


def cmd_predict(args):
    gt, cams = _load_scene(args.scene)
    if args.frame >= len(cams):
        raise ValidationError(f"frame {args.frame} out of range; the trajectory has {len(cams)} frames")
    config = _predict_config(args)
    weights = _weights(args, config)
    cam = cams[args.frame]
    pyramid, _ = render_feature_pyramid(gt, cam, levels=config.levels, c_feat=config.c_feat)
    pred = predict_local(cam, pyramid, weights, config, frame_seed=args.frame, floor_z=gt.box.origin[2],
                         voxel_size=gt.box.voxel_size)
    metrics = evaluate_local(pred, gt)
    out = _out_dir(args.out)
    write_grid(out / "pred.occg", pred.grid)
    write_gaussians(out / "gaussians.json", pred.anchors, config.s_max, pred.box)
    (out / "local_frame.json").write_text(json.dumps({"local_to_world": pred.pose.tolist(), "box": pred.box.to_dict()}))
    write_metrics_csv(out / "metrics.csv", metrics)
    if args.export_csv:
        write_export_csv(args.export_csv, pred.grid)
    _print_metrics(metrics)


def cmd_explore(args):
    gt, cams = _load_scene(args.scene)
    if args.frames is not None:
        cams = cams[: args.frames]
    config = _predict_config(args)
    weights = _weights(args, config)
    rows = []

    def record(i, state, m):
        rows.append(f"{i},{state.explored_count},{float(m.iou)!r},{float(m.miou)!r}")
        log.info("frame %d explored %d iou %.4f miou %.4f", i, state.explored_count, m.iou, m.miou)

    state = explore(gt, cams, weights, config, args.strategy, callback=record)
    metrics = evaluate_global(state, gt)
    out = _out_dir(args.out)
    save_state(state, out)
    write_metrics_csv(out / "metrics.csv", metrics)
    (out / "frames.csv").write_text("frame,explored_voxels,iou,miou\n" + "".join(r + "\n" for r in rows))
    if args.export_csv:
        write_export_csv(args.export_csv, state.grid)
    _print_metrics(metrics)


def cmd_eval(args):
    pred = read_grid(args.pred)
    gt = read_grid(args.gt)
    mask = None
    if args.mask:
        m = read_grid(args.mask)
        if m.dims != gt.dims:
            raise ValidationError(f"mask dims {m.dims} do not match {gt.dims}")
        mask = m.labels != 0
    metrics = iou_miou(pred, gt, mask=mask)
    if args.out:
        write_metrics_csv(args.out, metrics)
    if not metrics.valid:
        print("warning: empty evaluation mask, metrics are undefined", file=sys.stderr)
    _print_metrics(metrics)


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "predict": cmd_predict, "explore": cmd_explore, "eval": cmd_eval}


def main(argv=None):
    args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with num_threads(args.threads), np.errstate(all="ignore"):
            COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
