from __future__ import annotations

import time
from pathlib import Path
from typing import Dict, List

import numpy as np

from src.config import MappingConfig, TrackingConfig
from src.dataset import GridSceneSpec, TrajectorySpec, synth_from_grid, synth_from_grid_spec
from src.eval import evaluate_map, evaluate_trajectory, speed_accuracy_sweep
from src.mapping import map_scene
from src.pose import PosePerturbation
from src.renderer import RenderOptions
from src.tracking import track_frame, track_sequence
from src.utils.io import export_csv
from src.utils.log import setup_logging

EXPORT_DIR = Path("data/exports")

SEED = 0
CELLS = 64
ARC_FRAMES = 30
SEQUENCE_FRAMES = 50
KEYFRAME_STRIDE = 3
MAP_ITERATIONS = 1500

MAX_ROT_DEG = 2.0
MAX_TRANS_M = 0.05
RECOVER_ROT_DEG = 0.2

# 7.2 deg between frames of the full circle, lr_rot 1e-3 rad per iteration
TRACK_ITERATIONS = 200

SWEEP_RAYS = [128, 256, 512, 1024, 2048]
SWEEP_ITERS = [TRACK_ITERATIONS]

SCENE = GridSceneSpec(
    cells=CELLS,
    lo=[-1.0, -1.0, -1.0],
    hi=[1.0, 1.0, 1.0],
    clear_radius=0.35,
    trajectory=TrajectorySpec(kind="circle", num_frames=ARC_FRAMES, center=[0.0, 0.0, 0.0], radius=0.3, arc_deg=360.0),
    seed=SEED,
)


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def perturb(pose, rng: np.random.Generator):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    omega = axis * np.deg2rad(rng.uniform(0.0, MAX_ROT_DEG))
    tau = direction * rng.uniform(0.0, MAX_TRANS_M)
    return PosePerturbation(omega, tau).apply(pose)


def main():
    setup_logging("INFO")
    summary: List[Dict[str, object]] = []

    # -----------------------------
    # Mapping self-consistency
    # -----------------------------
    print(f"[SYNTH] {ARC_FRAMES}-pose arc through a random {CELLS}^3 grid")
    ds, truth = synth_from_grid_spec(SCENE)
    voxel = truth.geometry.voxel_size

    cfg = MappingConfig(
        iterations_per_stage=MAP_ITERATIONS,
        upsample_schedule=[CELLS],
        keyframe_stride=KEYFRAME_STRIDE,
        seed=SEED,
    )
    t0 = time.perf_counter()
    mapped = map_scene(ds, cfg, geometry=truth.geometry).grid
    report = evaluate_map(mapped, ds, indices=ds.heldout_indices(KEYFRAME_STRIDE), seed=SEED)
    ok = report.psnr >= 30.0 and report.depth_l1 <= voxel
    print(f"[MAP] psnr={report.psnr:.2f} dB depth_l1={report.depth_l1:.4f} m voxel={voxel:.4f} m "
          f"({time.perf_counter() - t0:.0f} s) {_verdict(ok)}")
    summary.append({"check": "mapping", "value": f"{report.psnr:.2f} dB / {report.depth_l1:.4f} m", "pass": ok})

    # -----------------------------
    # Per-frame recovery from perturbed inits
    # -----------------------------
    rng = np.random.default_rng(SEED)
    tcfg = TrackingConfig(iterations=TRACK_ITERATIONS, seed=SEED)
    options = RenderOptions.for_grid(truth, step_ratio=tcfg.step_ratio, t_near=tcfg.t_near)
    recovered = 0
    for i, frame in enumerate(ds.frames):
        init = perturb(frame.gt_pose, rng)
        res = track_frame(truth, frame, init, tcfg, ds.intrinsics, rng=rng, options=options)
        rot = np.rad2deg(res.pose.angle_to(frame.gt_pose))
        trans = res.pose.distance_to(frame.gt_pose)
        if not res.failed and rot <= RECOVER_ROT_DEG and trans <= voxel / 2:
            recovered += 1
        else:
            print(f"  frame {i}: rot={rot:.3f} deg trans={trans:.4f} m failed={res.failed}")
    rate = recovered / len(ds)
    print(f"[TRACK] recovered {recovered}/{len(ds)} perturbed frames ({rate:.0%}) {_verdict(rate >= 0.95)}")
    summary.append({"check": "recovery", "value": f"{rate:.3f}", "pass": rate >= 0.95})

    # -----------------------------
    # Sequence tracking + determinism
    # -----------------------------
    seq_spec = TrajectorySpec(kind="circle", num_frames=SEQUENCE_FRAMES, center=[0.0, 0.0, 0.0], radius=0.3)
    seq_ds = synth_from_grid(truth, seq_spec.build(), ds.intrinsics, timestamps=seq_spec.timestamps())
    big = TrackingConfig(rays_per_iteration=max(SWEEP_RAYS), iterations=TRACK_ITERATIONS, seed=SEED)
    seq = track_sequence(truth, seq_ds.frames, seq_ds.intrinsics, big)
    m = evaluate_trajectory(seq.trajectory, seq_ds.trajectory(), interval=0.2)
    ok = m.ate_rmse <= voxel and (m.rpe_r or 0.0) <= 0.3 and (m.rpe_t or 0.0) <= voxel / 2
    print(f"[TRACK] sequence ATE={m.ate_rmse:.4f} m RPE_t={m.rpe_t} m RPE_r={m.rpe_r} deg {_verdict(ok)}")
    summary.append({"check": "sequence", "value": f"{m.ate_rmse:.4f} m", "pass": ok})

    again = track_sequence(truth, seq_ds.frames, seq_ds.intrinsics, big)
    same = again.trajectory.to_tum_lines() == seq.trajectory.to_tum_lines()
    print(f"[TRACK] rerun identical: {same} {_verdict(same)}")
    summary.append({"check": "determinism", "value": str(same), "pass": same})

    # -----------------------------
    # Speed vs accuracy
    # -----------------------------
    sweep = speed_accuracy_sweep(truth, seq_ds, SWEEP_RAYS, SWEEP_ITERS, TrackingConfig(seed=SEED), rpe_interval=0.2)
    sweep.save_csv(
        EXPORT_DIR / "sweep.csv",
        header_comment=f"spearman {sweep.spearman:.6f} spearman_budget {sweep.spearman_budget:.6f}",
    )
    first, last = sweep.rows[0]["ate_m"], sweep.rows[-1]["ate_m"]
    ok = sweep.spearman <= 0.0 and last <= 0.5 * first
    print(f"[SWEEP] spearman={sweep.spearman:.3f} ATE {first:.4f} -> {last:.4f} m {_verdict(ok)}")
    summary.append({"check": "sweep", "value": f"{sweep.spearman:.3f}", "pass": ok})

    path = export_csv(summary, EXPORT_DIR / "self_consistency.csv", ["check", "value", "pass"])
    print(f"\n[EXPORT] {path.resolve()}")
    print(f"[SUMMARY] {sum(1 for r in summary if r['pass'])}/{len(summary)} checks passed")


if __name__ == "__main__":
    main()
