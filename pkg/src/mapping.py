# src/mapping.py
"""
Offline map optimization with known poses.

Each step draws rays uniformly over (keyframe, pixel) pairs, renders them, and takes one
sparse RMSProp step on L = L_p + lambda_d * L_g. Rays that hit no active cell and pixels
with invalid depth are dropped from both terms.

Stages follow config.upsample_schedule (cells along the longest axis). Between stages the
grid is optionally pruned, then upsampled, and the RMSProp state is reset.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import MappingConfig
from src.dataset import Dataset, DatasetError
from src.gradients import NonFiniteLossError, backprop_to_vertices, render_contribution
from src.optim import RmspropState
from src.renderer import RayWorkspace, RenderOptions, generate_rays, render_rays
from src.utils.io import export_csv
from src.utils.parallel import chunk_ranges, map_chunks
from src.voxel_grid import GradientBuffer, GridGeometry, VoxelGrid

log = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0
TRAINING_LOG_COLUMNS = ["iteration", "L_p", "L_g", "L", "psnr_estimate", "elapsed_ms"]


class EmptyBatchError(ValueError):
    pass


# -----------------------------
# Losses
# -----------------------------
def photometric_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over rays of the squared rgb residual norm."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0:
        raise EmptyBatchError("empty batch: no rays for the photometric loss")
    return float(np.mean(np.sum((pred - target) ** 2, axis=1)))


def geometric_loss(pred: np.ndarray, target: np.ndarray, valid: Optional[np.ndarray] = None) -> float:
    """Mean squared depth error (m^2) over rays with valid depth; 0 when none are valid."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    mask = target > 0 if valid is None else np.asarray(valid, dtype=bool).reshape(-1) & (target > 0)
    if not np.any(mask):
        log.warning("[MAP] geometric loss over an empty batch, contributing 0")
        return 0.0
    return float(np.mean((pred[mask] - target[mask]) ** 2))


def psnr_from_loss(l_p: float) -> float:
    """L_p sums three channels, so the per-channel MSE is L_p / 3."""
    if l_p <= 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(3.0 / l_p)))


# -----------------------------
# Ray batches
# -----------------------------
@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    z_factor: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    frame_idx: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __len__(self) -> int:
        return int(self.origins.shape[0])


def sample_ray_batch(
    dataset: Dataset,
    frame_ids: Sequence[int],
    n_rays: int,
    rng: np.random.Generator,
) -> RayBatch:
    """Uniform (frame, pixel) pairs over frame_ids; rays are grouped by frame."""
    intr = dataset.intrinsics
    fids = np.asarray(frame_ids, dtype=np.int64)
    pick = np.sort(fids[rng.integers(0, fids.size, size=n_rays)])
    u = rng.integers(0, intr.width, size=n_rays)
    v = rng.integers(0, intr.height, size=n_rays)

    origins = np.empty((n_rays, 3))
    dirs = np.empty((n_rays, 3))
    zf = np.empty(n_rays)
    color = np.empty((n_rays, 3))
    depth = np.empty(n_rays)
    for f in np.unique(pick):
        sel = pick == f
        frame = dataset.frames[int(f)]
        if frame.gt_pose is None:
            raise DatasetError(f"frame {int(f)} has no pose; mapping needs known poses")
        o, d, z = generate_rays(intr, frame.gt_pose, u[sel], v[sel])
        origins[sel], dirs[sel], zf[sel] = o, d, z
        color[sel] = frame.color[v[sel], u[sel]]
        depth[sel] = frame.depth[v[sel], u[sel]]
    return RayBatch(origins, dirs, zf, color, depth, pick, u, v)


# -----------------------------
# One optimization step
# -----------------------------
@dataclass
class StepStats:
    L_p: float
    L_g: float
    L: float
    psnr_estimate: float
    n_rays: int
    n_hit: int
    n_used: int


def _report_nonfinite(batch: RayBatch, ranges, workspaces: List[RayWorkspace]) -> None:
    for (a, _), ws in zip(ranges, workspaces):
        bad = ~np.all(np.isfinite(ws.color), axis=1) | ~np.isfinite(ws.depth)
        if np.any(bad):
            i = a + int(np.flatnonzero(bad)[0])
            raise NonFiniteLossError(
                f"non-finite render for ray {i} (frame {int(batch.frame_idx[i])}, "
                f"pixel ({int(batch.u[i])}, {int(batch.v[i])}))"
            )
    raise NonFiniteLossError("non-finite loss")


def mapping_step(
    grid: VoxelGrid,
    dataset: Dataset,
    frame_ids: Sequence[int],
    config: MappingConfig,
    rng: np.random.Generator,
    state: Optional[RmspropState] = None,
    *,
    options: Optional[RenderOptions] = None,
    threads: int = 1,
    deterministic: bool = True,
) -> Tuple[StepStats, VoxelGrid, RmspropState]:
    if state is None:
        state = new_rmsprop(grid, config)
    if options is None:
        options = RenderOptions.for_grid(
            grid, step_ratio=config.step_ratio, t_near=config.t_near, t_far=config.t_far
        )
    batch = sample_ray_batch(dataset, frame_ids, config.rays_per_batch, rng)
    ranges = chunk_ranges(len(batch), config.chunk_rays)

    def _forward(a: int, b: int) -> RayWorkspace:
        return render_rays(grid, batch.origins[a:b], batch.dirs[a:b], options)

    workspaces = map_chunks(_forward, ranges, threads=threads, ordered=True)
    hit = np.concatenate([ws.hit for ws in workspaces])
    pred_c = np.concatenate([ws.color for ws in workspaces])
    pred_z = np.concatenate([ws.depth for ws in workspaces]) * batch.z_factor
    keep = hit & (batch.depth > 0)

    n_hit = int(hit.sum())
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise EmptyBatchError("empty batch: no sampled ray with valid depth hits an active cell")

    l_p = photometric_loss(pred_c[keep], batch.color[keep])
    l_g = geometric_loss(pred_z, batch.depth, keep)
    loss = l_p + config.lambda_d * l_g
    if not np.isfinite(loss):
        _report_nonfinite(batch, ranges, workspaces)

    # dL/dC and dL/dD (ray distance) per ray
    up_c = np.where(keep[:, None], 2.0 * (pred_c - batch.color) / n_keep, 0.0)
    up_d = np.zeros(len(batch))
    if config.lambda_d > 0:
        up_d[keep] = (
            config.lambda_d * 2.0 * (pred_z[keep] - batch.depth[keep]) / n_keep
        ) * batch.z_factor[keep]

    def _backward(i: int) -> GradientBuffer:
        a, b = ranges[i]
        ws = workspaces[i]
        contrib = render_contribution(ws, up_c[a:b], up_d[a:b] if config.lambda_d > 0 else None)
        return backprop_to_vertices(grid, ws, contrib)

    parts = map_chunks(
        lambda a, b: _backward(a), [(i, i + 1) for i in range(len(ranges))],
        threads=threads, ordered=deterministic,
    )
    buffer = GradientBuffer(grid.geometry.num_vertices)
    for p in parts:
        buffer.merge(p)
    idx, g = buffer.reduce()
    if not np.all(np.isfinite(g)):
        raise NonFiniteLossError("non-finite gradient in mapping step")
    state.step(grid.params, idx, g)

    stats = StepStats(
        L_p=l_p, L_g=l_g, L=loss, psnr_estimate=psnr_from_loss(l_p),
        n_rays=len(batch), n_hit=n_hit, n_used=n_keep,
    )
    log.debug("[MAP] step L=%.6g L_p=%.6g L_g=%.6g hit=%d/%d", loss, l_p, l_g, n_hit, len(batch))
    return stats, grid, state


def new_rmsprop(grid: VoxelGrid, config: MappingConfig) -> RmspropState:
    return RmspropState(
        grid.geometry.num_vertices,
        lr_sigma=config.lr_sigma,
        lr_sh=config.lr_sh,
        decay=config.rmsprop_decay,
        eps=config.rmsprop_eps,
        dtype=grid.dtype,
    )


# -----------------------------
# Bounds and initialization
# -----------------------------
def scene_bounds(dataset: Dataset, frame_ids: Sequence[int], pixel_stride: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box around back-projected valid depth and the camera centers."""
    intr = dataset.intrinsics
    u, v = intr.pixel_grid(pixel_stride)
    ui, vi = u.astype(np.int64), v.astype(np.int64)
    pts = []
    n_depth = 0
    for f in frame_ids:
        frame = dataset.frames[int(f)]
        if frame.gt_pose is None:
            raise DatasetError(f"frame {int(f)} has no pose")
        z = frame.depth[vi, ui]
        ok = z > 0
        n_depth += int(ok.sum())
        if np.any(ok):
            cam = intr.camera_dirs(u[ok], v[ok]) * z[ok, None]
            pts.append(frame.gt_pose.transform_points(cam))
        pts.append(frame.gt_pose.translation[None])
    if n_depth == 0:
        raise DatasetError("cannot infer grid bounds: no valid depth in keyframes; pass an explicit geometry")
    allp = np.concatenate(pts)
    return allp.min(axis=0), allp.max(axis=0)


def initial_grid(geometry: GridGeometry, config: MappingConfig) -> VoxelGrid:
    return VoxelGrid.constant(geometry, sigma=config.init_sigma, sh=config.init_sh, dtype=config.dtype)


# -----------------------------
# Full schedule
# -----------------------------
@dataclass
class MappingResult:
    grid: VoxelGrid
    log_rows: List[Dict[str, float]] = field(default_factory=list)
    stages: List[Dict[str, object]] = field(default_factory=list)


def map_scene(
    dataset: Dataset,
    config: MappingConfig,
    *,
    geometry: Optional[GridGeometry] = None,
    threads: int = 1,
    deterministic: bool = True,
    log_every: int = 100,
) -> MappingResult:
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    keyframes = dataset.keyframe_indices(config.keyframe_stride)
    rng = np.random.default_rng(config.seed)

    if geometry is None:
        lo, hi = scene_bounds(dataset, keyframes)
        geometry = GridGeometry.from_bounds(lo, hi, config.upsample_schedule[0], config.bounds_margin)
    grid = initial_grid(geometry, config)
    result = MappingResult(grid)
    log.info(
        "[MAP] %d keyframes of %d frames, grid %s, voxel %.4f m",
        len(keyframes), len(dataset), geometry.resolution, geometry.voxel_size,
    )
    if config.iterations_per_stage == 0:
        return result

    t0 = time.perf_counter()
    it = 0
    for s, cells in enumerate(config.upsample_schedule):
        if s > 0:
            if config.prune_between_stages:
                grid.prune(config.prune_threshold)
            grid = grid.upsample(2, max_cells=config.max_cells)
        state = new_rmsprop(grid, config)
        options = RenderOptions.for_grid(grid, step_ratio=config.step_ratio, t_near=config.t_near, t_far=config.t_far)
        stage_t0 = time.perf_counter()
        stats = None
        for k in range(config.iterations_per_stage):
            stats, grid, state = mapping_step(
                grid, dataset, keyframes, config, rng, state,
                options=options, threads=threads, deterministic=deterministic,
            )
            it += 1
            result.log_rows.append(
                {
                    "iteration": it,
                    "L_p": stats.L_p,
                    "L_g": stats.L_g,
                    "L": stats.L,
                    "psnr_estimate": stats.psnr_estimate,
                    "elapsed_ms": 1000.0 * (time.perf_counter() - t0),
                }
            )
            if log_every and (k + 1) % log_every == 0:
                log.info(
                    "[MAP] stage %d (%d cells) it %d/%d L=%.5g psnr~%.2f dB",
                    s, cells, k + 1, config.iterations_per_stage, stats.L, stats.psnr_estimate,
                )
        result.stages.append(
            {
                "stage": s,
                "cells": cells,
                "resolution": list(grid.geometry.resolution),
                "final_loss": None if stats is None else stats.L,
                "seconds": time.perf_counter() - stage_t0,
                "active_cells": int(grid.occupancy.sum()),
            }
        )
    result.grid = grid
    log.info("[MAP] done: %d iterations in %.1f s", it, time.perf_counter() - t0)
    return result


def write_training_log(rows: List[Dict[str, float]], path: str | Path, config: MappingConfig) -> Path:
    header = "config " + json.dumps(config.model_dump(), sort_keys=True)
    p = export_csv(rows, path, TRAINING_LOG_COLUMNS, header_comment=header)
    log.info("[IO] wrote training log %s (%d rows)", p, len(rows))
    return p
