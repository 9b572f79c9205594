# src/tracking.py
"""
Frame-to-model tracking against a frozen grid.

The pose is updated on a local 6-vector chart (omega, tau): rotation about the camera
center, then translation. With that chart dL/dtau is the sum of per-ray dL/do and dL/domega
is the sum of d x dL/dd (direction gradient projected onto the unit-sphere tangent).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.camera import CameraIntrinsics, Frame
from src.config import TrackingConfig
from src.gradients import grad_wrt_ray, render_contribution
from src.optim import AdamState
from src.pose import Pose, PosePerturbation, Trajectory
from src.renderer import RayWorkspace, RenderOptions, generate_rays, render_pixels, render_rays
from src.utils.io import export_csv
from src.utils.parallel import chunk_ranges, map_chunks
from src.voxel_grid import VoxelGrid

log = logging.getLogger(__name__)

STATUS_COLUMNS = ["frame", "timestamp", "iterations", "first_loss", "final_loss", "elapsed_ms", "failed"]


class UntrackableFrameError(RuntimeError):
    pass


# -----------------------------
# Loss and gradient
# -----------------------------
def tracking_loss(
    ws: RayWorkspace,
    z_factor: np.ndarray,
    target_color: np.ndarray,
    target_depth: np.ndarray,
    config: TrackingConfig,
    n_hit: Optional[int] = None,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    lambda_c * L_p + lambda_d * L_g over hit rays of one workspace.
    Returns (loss, dL/dC [M, 3], dL/dD_ray [M]). n_hit overrides the normalizer for chunked batches.
    """
    hit = ws.hit
    m = int(hit.sum()) if n_hit is None else int(n_hit)
    if m == 0:
        return 0.0, np.zeros((ws.num_rays, 3)), np.zeros(ws.num_rays)
    rc = np.where(hit[:, None], ws.color - target_color, 0.0)
    rz = np.where(hit, ws.depth * z_factor - target_depth, 0.0)
    loss = (config.lambda_c * np.sum(rc * rc) + config.lambda_d * np.sum(rz * rz)) / m
    up_c = config.lambda_c * 2.0 * rc / m
    up_d = config.lambda_d * 2.0 * rz * z_factor / m
    return float(loss), up_c, up_d


@dataclass
class PoseGradient:
    d_omega: np.ndarray
    d_tau: np.ndarray
    loss: float
    n_rays: int
    n_hit: int

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.d_omega, self.d_tau])


def rotation_gradient(dirs: np.ndarray, d_dir: np.ndarray) -> np.ndarray:
    """sum over rays of d x (I - d d^T) dL/dd."""
    tangential = d_dir - np.sum(d_dir * dirs, axis=1, keepdims=True) * dirs
    return np.cross(dirs, tangential).sum(axis=0)


def pose_gradient(
    grid: VoxelGrid,
    frame: Frame,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    u: np.ndarray,
    v: np.ndarray,
    config: TrackingConfig,
    *,
    options: Optional[RenderOptions] = None,
    threads: int = 1,
) -> PoseGradient:
    """Loss and 6-dof gradient at `pose` over pixels (u, v); pixels should carry valid depth."""
    if options is None:
        options = RenderOptions.for_grid(grid, step_ratio=config.step_ratio, t_near=config.t_near, t_far=config.t_far)
    ui = np.asarray(u, dtype=np.int64)
    vi = np.asarray(v, dtype=np.int64)
    origins, dirs, zf = generate_rays(intrinsics, pose, ui, vi)
    target_c = frame.color[vi, ui]
    target_d = frame.depth[vi, ui]
    ranges = chunk_ranges(len(origins), config.chunk_rays)

    workspaces = map_chunks(
        lambda a, b: render_rays(grid, origins[a:b], dirs[a:b], options), ranges, threads=threads, ordered=True
    )
    n_hit = int(sum(int(ws.hit.sum()) for ws in workspaces))
    if n_hit == 0:
        raise UntrackableFrameError(f"untrackable frame: none of {len(origins)} sampled rays hit an active cell")

    def _grad(i: int):
        a, b = ranges[i]
        ws = workspaces[i]
        loss, up_c, up_d = tracking_loss(ws, zf[a:b], target_c[a:b], target_d[a:b], config, n_hit=n_hit)
        contrib = render_contribution(ws, up_c, up_d)
        g = grad_wrt_ray(grid, ws, contrib, include_sh_direction=config.include_sh_direction)
        return loss, g.total_origin(), rotation_gradient(ws.dirs, g.d_dir)

    parts = map_chunks(lambda a, b: _grad(a), [(i, i + 1) for i in range(len(ranges))], threads=threads, ordered=True)
    loss = float(sum(p[0] for p in parts))
    d_tau = np.sum([p[1] for p in parts], axis=0)
    d_omega = np.sum([p[2] for p in parts], axis=0)
    return PoseGradient(d_omega, d_tau, loss, len(origins), n_hit)


# -----------------------------
# Single frame
# -----------------------------
@dataclass
class TrackResult:
    pose: Pose
    losses: List[float] = field(default_factory=list)
    iterations: int = 0
    failed: bool = False
    converged: bool = False
    elapsed_ms: float = 0.0

    @property
    def first_loss(self) -> float:
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self) -> float:
        return min(self.losses) if self.losses else float("nan")


def valid_pixels(frame: Frame) -> Tuple[np.ndarray, np.ndarray]:
    v, u = np.nonzero(frame.valid_depth)
    return u, v


def track_frame(
    grid: VoxelGrid,
    frame: Frame,
    init: Pose,
    config: TrackingConfig,
    intrinsics: CameraIntrinsics,
    *,
    rng: Optional[np.random.Generator] = None,
    options: Optional[RenderOptions] = None,
    threads: int = 1,
) -> TrackResult:
    """Adam descent from init; returns the best-loss pose seen, or init when the loss diverges."""
    t0 = time.perf_counter()
    result = TrackResult(pose=init)
    if config.iterations == 0:
        return result
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if options is None:
        options = RenderOptions.for_grid(grid, step_ratio=config.step_ratio, t_near=config.t_near, t_far=config.t_far)

    pu, pv = valid_pixels(frame)
    if pu.size == 0:
        raise UntrackableFrameError("untrackable frame: no pixel has valid depth")

    lr = np.array([config.lr_rot] * 3 + [config.lr_trans] * 3)
    adam = AdamState(lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    pose = init
    best_loss, best_pose = np.inf, init
    over = 0
    for k in range(config.iterations):
        pick = rng.integers(0, pu.size, size=min(config.rays_per_iteration, pu.size))
        g = pose_gradient(grid, frame, pose, intrinsics, pu[pick], pv[pick], config, options=options, threads=threads)
        result.losses.append(g.loss)
        result.iterations = k + 1
        if g.loss < best_loss:
            best_loss, best_pose = g.loss, pose

        if g.loss > config.divergence_factor * result.losses[0]:
            over += 1
            if over >= config.divergence_patience:
                log.warning("[TRACK] diverged after %d iterations, returning init", k + 1)
                result.failed = True
                result.pose = init
                result.elapsed_ms = 1000.0 * (time.perf_counter() - t0)
                return result
        else:
            over = 0

        step = adam.step(g.vector)
        pose = PosePerturbation.from_vector(-step).apply(pose)
        if np.linalg.norm(step) < config.convergence_threshold:
            result.converged = True
            break

    result.pose = best_pose
    result.elapsed_ms = 1000.0 * (time.perf_counter() - t0)
    return result


# -----------------------------
# Sequence
# -----------------------------
@dataclass
class FrameStatus:
    frame: int
    timestamp: float
    iterations: int
    first_loss: float
    final_loss: float
    elapsed_ms: float
    failed: bool

    def as_row(self) -> Dict[str, object]:
        return {
            "frame": self.frame,
            "timestamp": f"{self.timestamp:.6f}",
            "iterations": self.iterations,
            "first_loss": self.first_loss,
            "final_loss": self.final_loss,
            "elapsed_ms": f"{self.elapsed_ms:.3f}",
            "failed": int(self.failed),
        }


@dataclass
class SequenceResult:
    trajectory: Trajectory
    statuses: List[FrameStatus] = field(default_factory=list)

    @property
    def num_failed(self) -> int:
        return sum(1 for s in self.statuses if s.failed)

    @property
    def ms_per_frame(self) -> float:
        tracked = [s.elapsed_ms for s in self.statuses[1:]]
        return float(np.mean(tracked)) if tracked else 0.0


def check_first_frame(
    grid: VoxelGrid, frame: Frame, pose: Pose, intrinsics: CameraIntrinsics, *, stride: int = 4, threads: int = 1
) -> int:
    """Rays from the start pose that hit the map; raises UntrackableFrameError when there are none."""
    u, v = intrinsics.pixel_grid(stride)
    _, _, hit = render_pixels(grid, intrinsics, pose, u, v, RenderOptions.for_grid(grid), threads=threads)
    if not hit.any():
        raise UntrackableFrameError("untrackable first frame: no ray from the start pose hits an active cell")
    return int(hit.sum())


def predict_pose(good: Sequence[Pose], policy: str) -> Pose:
    """previous: last good pose; constant_velocity: p1 o (p0^-1 o p1)."""
    if policy == "constant_velocity" and len(good) >= 2:
        p0, p1 = good[-2], good[-1]
        return p1.compose(p0.inverse().compose(p1))
    return good[-1]


def track_sequence(
    grid: VoxelGrid,
    frames: Sequence[Frame],
    intrinsics: CameraIntrinsics,
    config: TrackingConfig,
    *,
    first_pose: Optional[Pose] = None,
    threads: int = 1,
) -> SequenceResult:
    if not frames:
        raise ValueError("no frames to track")
    start = first_pose if first_pose is not None else frames[0].gt_pose
    if start is None:
        raise ValueError("first frame pose is required (ground truth or first_pose)")

    checksum = grid.checksum()
    rng = np.random.default_rng(config.seed)
    options = RenderOptions.for_grid(grid, step_ratio=config.step_ratio, t_near=config.t_near, t_far=config.t_far)
    traj = Trajectory()
    traj.append(frames[0].timestamp, start)
    out = SequenceResult(traj, [FrameStatus(0, frames[0].timestamp, 0, float("nan"), float("nan"), 0.0, False)])
    good: List[Pose] = [start]

    for i in range(1, len(frames)):
        frame = frames[i]
        init = predict_pose(good, config.init_policy)
        try:
            res = track_frame(grid, frame, init, config, intrinsics, rng=rng, options=options, threads=threads)
        except UntrackableFrameError as e:
            log.warning("[TRACK] frame %d: %s", i, e)
            res = TrackResult(pose=init, failed=True)
        traj.append(frame.timestamp, res.pose)
        out.statuses.append(
            FrameStatus(i, frame.timestamp, res.iterations, res.first_loss, res.final_loss, res.elapsed_ms, res.failed)
        )
        if not res.failed:
            good.append(res.pose)
        if (i % 10) == 0 or i == len(frames) - 1:
            log.info(
                "[TRACK] frame %d/%d loss %.4g -> %.4g (%d it, %.0f ms)%s",
                i, len(frames) - 1, res.first_loss, res.final_loss, res.iterations, res.elapsed_ms,
                " FAILED" if res.failed else "",
            )

    if grid.checksum() != checksum:
        raise RuntimeError("grid was modified during tracking")
    log.info("[TRACK] %d frames, %d failed, %.1f ms/frame", len(frames), out.num_failed, out.ms_per_frame)
    return out


def write_status_csv(statuses: Sequence[FrameStatus], path: str | Path, header_comment: Optional[str] = None) -> Path:
    return export_csv([s.as_row() for s in statuses], path, STATUS_COLUMNS, header_comment=header_comment)
