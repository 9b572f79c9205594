# src/cli.py
"""
voxfield: synthesize RGB-D sequences, map them into a voxel radiance field, track cameras
against the map and evaluate the results.

Exit codes: 0 success, 2 input or configuration error, 3 runtime or tracking failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from src.camera import CameraIntrinsics
from src.config import RunConfig, build_run_config, get_settings
from src.dataset import DatasetError, load_dataset, load_scene_spec, save_dataset, synth_from_grid_spec, synth_from_primitives
from src.eval import MetricReport, evaluate_map, evaluate_trajectory, save_report, speed_accuracy_sweep
from src.gradients import run_gradcheck
from src.mapping import map_scene, write_training_log
from src.pose import Pose, Trajectory
from src.renderer import RenderOptions, render_image
from src.tracking import check_first_frame, track_sequence, write_status_csv
from src.utils.io import read_json, write_color_png, write_depth_png
from src.utils.log import setup_logging
from src.voxel_grid import VoxelGrid

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RUNTIME = 3


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def _pose_arg(text: str) -> Pose:
    parts = text.replace(",", " ").split()
    if len(parts) != 7:
        raise argparse.ArgumentTypeError("pose must be 7 numbers: tx ty tz qx qy qz qw")
    vals = [float(x) for x in parts]
    return Pose(np.array(vals[3:]), np.array(vals[:3]))


def _config_echo(cfg: RunConfig) -> str:
    return "config " + json.dumps(cfg.model_dump(), sort_keys=True)


def _run_config(args: argparse.Namespace, mapping: Optional[Dict[str, Any]] = None,
                tracking: Optional[Dict[str, Any]] = None) -> RunConfig:
    overrides: Dict[str, Any] = {
        "seed": args.seed,
        "threads": args.threads,
        "deterministic": True if args.deterministic else None,
        "mapping": {k: v for k, v in (mapping or {}).items() if v is not None},
        "tracking": {k: v for k, v in (tracking or {}).items() if v is not None},
    }
    cfg = build_run_config(args.config, overrides)
    log.info("[CLI] %s", _config_echo(cfg))
    return cfg


# -----------------------------
# Commands
# -----------------------------
def cmd_synth(args: argparse.Namespace) -> int:
    spec = load_scene_spec(args.spec)
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    threads = args.threads or get_settings().threads
    out = Path(args.out)
    if spec.kind == "grid":
        ds, grid = synth_from_grid_spec(spec, threads=threads)
        save_dataset(ds, out)
        grid.save(out / "generator.vxgf")
    else:
        res = synth_from_primitives(spec, threads=threads)
        save_dataset(res.dataset, out)
        ds = res.dataset
    print(f"[SYNTH] {len(ds)} frames -> {out}")
    return EXIT_OK


def cmd_map(args: argparse.Namespace) -> int:
    cfg = _run_config(
        args,
        mapping={
            "lambda_d": args.lambda_d,
            "iterations_per_stage": args.iterations,
            "rays_per_batch": args.rays,
            "upsample_schedule": args.schedule,
            "keyframe_stride": args.keyframe_stride,
        },
    )
    ds = load_dataset(args.dataset)
    if not ds.has_poses:
        raise DatasetError(f"{args.dataset}: mapping needs poses (poses.txt)")
    result = map_scene(ds, cfg.mapping, threads=cfg.threads, deterministic=cfg.deterministic)
    grid_path = result.grid.save(args.out)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".csv")
    write_training_log(result.log_rows, log_path, cfg.mapping)
    print(f"[MAP] grid {grid_path} checksum {result.grid.checksum()}")
    return EXIT_OK


def cmd_track(args: argparse.Namespace) -> int:
    cfg = _run_config(
        args,
        tracking={
            "iterations": args.iterations,
            "rays_per_iteration": args.rays,
            "init_policy": args.init_policy,
            "lambda_d": args.lambda_d,
        },
    )
    grid = VoxelGrid.load(args.grid)
    ds = load_dataset(args.dataset)
    start = args.first_pose or ds.frames[0].gt_pose
    if start is None:
        raise DatasetError(f"{args.dataset}: first frame has no pose; pass --first-pose")
    check_first_frame(grid, ds.frames[0], start, ds.intrinsics, threads=cfg.threads)

    seq = track_sequence(grid, ds.frames, ds.intrinsics, cfg.tracking, first_pose=start, threads=cfg.threads)
    traj_path = seq.trajectory.save_tum(args.out)
    status_path = Path(args.status) if args.status else Path(args.out).with_suffix(".csv")
    write_status_csv(seq.statuses, status_path, header_comment=_config_echo(cfg))
    print(f"[TRACK] {len(seq.statuses)} frames, {seq.num_failed} failed, {seq.ms_per_frame:.1f} ms/frame -> {traj_path}")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    cfg = _run_config(args, mapping={"step_ratio": args.step_ratio})
    grid = VoxelGrid.load(args.grid)
    if args.dataset:
        ds = load_dataset(args.dataset)
        if not 0 <= args.frame < len(ds):
            raise DatasetError(f"frame {args.frame} out of range (dataset has {len(ds)})")
        intr = ds.intrinsics
        pose = args.pose or ds.frames[args.frame].gt_pose
    else:
        if not args.intrinsics:
            raise ValueError("render needs --dataset or --intrinsics")
        intr = CameraIntrinsics.model_validate(read_json(args.intrinsics))
        pose = args.pose
    if pose is None:
        raise ValueError("no pose: pass --pose or use a dataset with poses")

    m = cfg.mapping
    options = RenderOptions.for_grid(grid, step_ratio=m.step_ratio, t_near=m.t_near, t_far=m.t_far)
    img = render_image(grid, intr, pose, args.stride, options=options, threads=cfg.threads)
    prefix = str(args.out)
    write_color_png(prefix + "_color.png", img.color)
    write_depth_png(prefix + "_depth.png", img.depth, intr.depth_scale)
    print(f"[RENDER] {img.width}x{img.height} -> {prefix}_color.png, {prefix}_depth.png")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    report = MetricReport()
    ds = load_dataset(args.dataset) if args.dataset else None

    if args.grid:
        if ds is None:
            raise ValueError("map evaluation needs --dataset")
        grid = VoxelGrid.load(args.grid)
        indices = ds.heldout_indices(args.keyframe_stride) if args.keyframe_stride else None
        report = report.merged(
            evaluate_map(grid, ds, indices=indices or None, n_images=args.n_images,
                         n_pixels=args.n_pixels, seed=cfg.seed, threads=cfg.threads)
        )
    if args.trajectory:
        est = Trajectory.load_tum(args.trajectory)
        if args.reference:
            ref = Trajectory.load_tum(args.reference)
        elif ds is not None:
            ref = ds.trajectory()
        else:
            raise ValueError("trajectory evaluation needs --reference or --dataset")
        report = report.merged(evaluate_trajectory(est, ref, interval=args.rpe_interval))
    if not (args.grid or args.trajectory):
        raise ValueError("eval needs --grid and/or --trajectory")

    print(report.to_table())
    if args.out:
        save_report(report, args.out)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    res = run_gradcheck(
        cells=args.cells,
        n_rays=args.rays,
        seed=0 if args.seed is None else args.seed,
        eps=args.eps,
        max_params=args.max_params,
    )
    text = res.to_text()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    map_err, ray_err = res.max_rel_err
    print(f"[GRADCHECK] map max rel err {map_err:.3e} (threshold {args.threshold:.1e}); "
          f"ray max rel err {ray_err:.3e} (threshold {args.ray_threshold:.1e})")
    if map_err > args.threshold or ray_err > args.ray_threshold:
        print(res.map_report.worst if map_err > args.threshold else res.ray_report.worst)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _run_config(args, tracking={"init_policy": args.init_policy})
    grid = VoxelGrid.load(args.grid)
    ds = load_dataset(args.dataset)
    if not ds.has_poses:
        raise DatasetError(f"{args.dataset}: the sweep needs reference poses")
    res = speed_accuracy_sweep(
        grid, ds, args.rays, args.iters, cfg.tracking,
        repeats=args.repeats, rpe_interval=args.rpe_interval, threads=cfg.threads,
    )
    res.save_csv(args.out, header_comment=_config_echo(cfg) + f" spearman {res.spearman:.6f} spearman_budget {res.spearman_budget:.6f}")
    print(
        f"[SWEEP] {len(res.rows)} settings, spearman(rays, ATE) = {res.spearman:.3f}, "
        f"spearman(rays x iters, ATE) = {res.spearman_budget:.3f} -> {args.out}"
    )
    return EXIT_OK


# -----------------------------
# Parser
# -----------------------------
def _shared(out_help: str, out_required: bool = True) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=str, default=None, help="run config file (.json or .toml)")
    p.add_argument("--seed", type=int, default=None, help="random seed (unsigned integer)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (count; default from VOXFIELD_THREADS)")
    p.add_argument("--deterministic", action="store_true", help="ordered reductions for byte-identical outputs")
    p.add_argument("--log-file", type=str, default=None, help="also write log records to this file (path)")
    p.add_argument("--out", type=str, required=out_required, default=None, help=out_help)
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxfield", description="RGB-D mapping and tracking in a voxel radiance field")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[_shared("output dataset directory (path)")], help="render a synthetic dataset")
    p.add_argument("--spec", required=True, help="scene spec file (JSON path)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("map", parents=[_shared("output grid file (path, .vxgf)")], help="optimize a grid from posed frames")
    p.add_argument("--dataset", required=True, help="dataset directory (path)")
    p.add_argument("--lambda-d", type=float, default=None, help="depth loss weight (unitless; 0 = RGB only)")
    p.add_argument("--iterations", type=int, default=None, help="iterations per stage (count)")
    p.add_argument("--rays", type=int, default=None, help="rays per batch (count)")
    p.add_argument("--schedule", type=_int_list, default=None, help="cells per axis per stage, e.g. 32,64 (cells)")
    p.add_argument("--keyframe-stride", type=int, default=None, help="use every k-th frame for mapping (frames)")
    p.add_argument("--log", type=str, default=None, help="training log CSV (path; default next to --out)")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("track", parents=[_shared("output TUM trajectory (path)")], help="track frames against a frozen grid")
    p.add_argument("--grid", required=True, help="grid file (path)")
    p.add_argument("--dataset", required=True, help="dataset directory (path)")
    p.add_argument("--iterations", type=int, default=None, help="optimizer iterations per frame (count)")
    p.add_argument("--rays", type=int, default=None, help="rays per iteration (count)")
    p.add_argument("--lambda-d", type=float, default=None, help="depth loss weight (unitless)")
    p.add_argument("--init-policy", choices=["previous", "constant_velocity"], default=None, help="pose prediction for each new frame")
    p.add_argument("--first-pose", type=_pose_arg, default=None, help="first frame pose 'tx ty tz qx qy qz qw' (m, unit quaternion)")
    p.add_argument("--status", type=str, default=None, help="per-frame status CSV (path; default next to --out)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("render", parents=[_shared("output prefix (path); writes _color.png and _depth.png")], help="render a view of a grid")
    p.add_argument("--grid", required=True, help="grid file (path)")
    p.add_argument("--dataset", type=str, default=None, help="dataset supplying intrinsics and the frame pose (path)")
    p.add_argument("--frame", type=int, default=0, help="frame index in --dataset (index)")
    p.add_argument("--intrinsics", type=str, default=None, help="intrinsics JSON when no dataset is given (path)")
    p.add_argument("--pose", type=_pose_arg, default=None, help="camera-to-world pose 'tx ty tz qx qy qz qw' (m, unit quaternion)")
    p.add_argument("--stride", type=int, default=1, help="pixel stride (pixels)")
    p.add_argument("--step-ratio", type=float, default=None, help="ray-march step, overrides mapping.step_ratio (fraction of a voxel)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[_shared("report JSON (path); a .txt table is written alongside", out_required=False)], help="map and trajectory metrics")
    p.add_argument("--grid", type=str, default=None, help="grid file for PSNR and depth L1 (path)")
    p.add_argument("--dataset", type=str, default=None, help="dataset directory (path)")
    p.add_argument("--keyframe-stride", type=int, default=None, help="evaluate only frames not used for mapping at this stride (frames)")
    p.add_argument("--n-images", type=int, default=10, help="sampled images (count)")
    p.add_argument("--n-pixels", type=int, default=10_000, help="sampled pixels per image (count)")
    p.add_argument("--trajectory", type=str, default=None, help="estimated TUM trajectory (path)")
    p.add_argument("--reference", type=str, default=None, help="reference TUM trajectory (path; default dataset poses)")
    p.add_argument("--rpe-interval", type=float, default=1.0, help="RPE interval (m of reference path)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[_shared("report text file (path)", out_required=False)], help="finite-difference check of analytic gradients")
    p.add_argument("--cells", type=int, default=4, help="cells per axis of the random grid (cells)")
    p.add_argument("--rays", type=int, default=20, help="random rays (count)")
    p.add_argument("--eps", type=float, default=1e-6, help="central-difference step (parameter units)")
    p.add_argument("--max-params", type=int, default=None, help="cap on checked map parameters (count)")
    p.add_argument("--threshold", type=float, default=1e-5, help="max relative error for map parameters (unitless)")
    p.add_argument("--ray-threshold", type=float, default=1e-4, help="max relative error for ray parameters (unitless)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", parents=[_shared("sweep CSV (path)")], help="tracking speed vs accuracy")
    p.add_argument("--grid", required=True, help="grid file (path)")
    p.add_argument("--dataset", required=True, help="dataset directory with reference poses (path)")
    p.add_argument("--rays", type=_int_list, default=[128, 256, 512, 1024, 2048], help="rays per iteration, comma-separated (count)")
    p.add_argument("--iters", type=_int_list, default=[40], help="iterations per frame, comma-separated (count)")
    p.add_argument("--repeats", type=int, default=1, help="runs per setting with consecutive seeds (count)")
    p.add_argument("--init-policy", choices=["previous", "constant_velocity"], default=None, help="pose prediction for each new frame")
    p.add_argument("--rpe-interval", type=float, default=1.0, help="RPE interval (m of reference path)")
    p.set_defaults(func=cmd_sweep)
    return ap


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "log_file", None):
        setup_logging(get_settings().log_level, log_file=args.log_file)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except (ValueError, OSError) as e:
        log.error("[CLI] %s: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except RuntimeError as e:
        log.error("[CLI] %s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv: Optional[List[str]] = None) -> None:
    setup_logging(get_settings().log_level)
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
