# src/renderer.py
"""
Ray generation and discrete volume rendering.

Rays are processed in batches. A batch keeps padded per-ray sample arrays [M, N] with a
validity mask; samples live on a lattice anchored at t_near (t = t_near + (k + 1/2) * step),
so the schedule depends only on the ray, the grid bounds and the occupancy mask.

Rendered depth is the expected ray distance; frames store z-depth. Rays without any active
sample render as background (zero color, zero depth) and are flagged as no-hit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from src.camera import CameraIntrinsics, Frame
from src.pose import Pose
from src.sh import SH_BASIS_DIM, check_unit, color_activation, sh_basis, sh_raw_color
from src.utils.parallel import DEFAULT_CHUNK, chunk_ranges, map_chunks
from src.voxel_grid import SH_SLICE, SIGMA, VoxelGrid

log = logging.getLogger(__name__)

EPS_T = 1e-4
DEFAULT_T_NEAR = 0.05
DEFAULT_STEP_RATIO = 0.5


class PixelOutOfBoundsError(ValueError):
    pass


# -----------------------------
# Options and rays
# -----------------------------
@dataclass(frozen=True)
class RenderOptions:
    step: float
    t_near: float = DEFAULT_T_NEAR
    t_far: float = np.inf
    eps_T: float = EPS_T

    def __post_init__(self) -> None:
        if not self.step > 0:
            raise ValueError(f"step must be > 0, got {self.step}")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")

    @classmethod
    def for_grid(
        cls,
        grid: VoxelGrid,
        *,
        step_ratio: float = DEFAULT_STEP_RATIO,
        t_near: float = DEFAULT_T_NEAR,
        t_far: Optional[float] = None,
        eps_T: float = EPS_T,
    ) -> "RenderOptions":
        geo = grid.geometry
        return cls(
            step=geo.voxel_size * step_ratio,
            t_near=t_near,
            t_far=geo.diagonal if t_far is None else t_far,
            eps_T=eps_T,
        )


@dataclass(frozen=True)
class Ray:
    o: np.ndarray
    d: np.ndarray

    def __post_init__(self) -> None:
        o = np.asarray(self.o, dtype=np.float64).reshape(3)
        d = np.asarray(self.d, dtype=np.float64).reshape(3)
        check_unit(d)
        object.__setattr__(self, "o", o)
        object.__setattr__(self, "d", d)

    def at(self, t: np.ndarray) -> np.ndarray:
        return self.o + np.asarray(t, dtype=np.float64)[..., None] * self.d


@dataclass(frozen=True)
class SampleSchedule:
    """Compact schedule of one ray: sample distances t and interval lengths delta (meters)."""

    t: np.ndarray
    delta: np.ndarray

    def __len__(self) -> int:
        return int(self.t.size)


@dataclass(frozen=True)
class RaySamples:
    """Padded schedules of a ray batch: t, delta, valid are [M, N]."""

    t: np.ndarray
    delta: np.ndarray
    valid: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def schedule(self, m: int) -> SampleSchedule:
        v = self.valid[m]
        return SampleSchedule(self.t[m, v].copy(), self.delta[m, v].copy())

    @classmethod
    def from_schedule(cls, schedule: SampleSchedule) -> "RaySamples":
        t = np.asarray(schedule.t, dtype=np.float64).reshape(1, -1)
        delta = np.asarray(schedule.delta, dtype=np.float64).reshape(1, -1)
        return cls(t, delta, np.ones_like(t, dtype=bool))


def _check_pixels(intrinsics: CameraIntrinsics, u: np.ndarray, v: np.ndarray) -> None:
    bad = (u < 0) | (u >= intrinsics.width) | (v < 0) | (v >= intrinsics.height) | ~np.isfinite(u) | ~np.isfinite(v)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise PixelOutOfBoundsError(
            f"pixel ({u.reshape(-1)[i]}, {v.reshape(-1)[i]}) outside {intrinsics.width}x{intrinsics.height} image"
        )


def generate_rays(
    intrinsics: CameraIntrinsics,
    pose: Pose,
    u: np.ndarray,
    v: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixels -> (origins [M, 3], unit world directions [M, 3], z factor [M])."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    _check_pixels(intrinsics, u, v)
    dc = intrinsics.camera_dirs(u, v)
    norm = np.linalg.norm(dc, axis=-1)
    dirs = (dc / norm[:, None]) @ pose.R.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs, 1.0 / norm


def generate_ray(intrinsics: CameraIntrinsics, pose: Pose, pixel: Sequence[float]) -> Ray:
    o, d, _ = generate_rays(intrinsics, pose, np.array([pixel[0]]), np.array([pixel[1]]))
    return Ray(o[0], d[0])


# -----------------------------
# Sampling
# -----------------------------
def ray_box_intersect(
    origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Slab test -> (t_enter, t_exit) per ray; t_enter > t_exit means a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    parallel = dirs == 0.0
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def sample_rays(
    grid: VoxelGrid,
    origins: np.ndarray,
    dirs: np.ndarray,
    options: RenderOptions,
) -> RaySamples:
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    geo = grid.geometry
    step = options.step

    t_in, t_out = ray_box_intersect(origins, dirs, geo.origin_array, geo.upper)
    t_enter = np.maximum(t_in, options.t_near)
    t_exit = np.minimum(t_out, options.t_far)
    hit_box = t_enter < t_exit

    k_start = np.zeros(len(origins), dtype=np.int64)
    n = np.zeros(len(origins), dtype=np.int64)
    if np.any(hit_box):
        te = t_enter[hit_box]
        tx = t_exit[hit_box]
        ks = np.maximum(np.ceil((te - options.t_near) / step - 0.5), 0).astype(np.int64)
        ke = np.ceil((tx - options.t_near) / step - 0.5).astype(np.int64)
        k_start[hit_box] = ks
        n[hit_box] = np.maximum(ke - ks, 0)

    width = int(n.max()) if n.size else 0
    j = np.arange(width)
    t = options.t_near + (k_start[:, None] + j[None, :] + 0.5) * step
    valid = (j[None, :] < n[:, None]) & (t < t_exit[:, None])
    delta = np.minimum(step, t_exit[:, None] - (t - 0.5 * step))
    delta = np.where(valid, delta, 0.0)

    if width and np.any(valid):
        vm, vn = np.nonzero(valid)
        p = origins[vm] + t[vm, vn, None] * dirs[vm]
        valid[vm, vn] = grid.cell_active(p)
        delta = np.where(valid, delta, 0.0)
    return RaySamples(t, delta, valid)


def sample_ray(grid: VoxelGrid, ray: Ray, step: float, t_near: float, t_far: float) -> SampleSchedule:
    opts = RenderOptions(step=step, t_near=t_near, t_far=t_far)
    return sample_rays(grid, ray.o[None], ray.d[None], opts).schedule(0)


# -----------------------------
# Compositing
# -----------------------------
def composite(
    sigma: np.ndarray,
    delta: np.ndarray,
    valid: np.ndarray,
    eps_T: float = EPS_T,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Effective densities [M, N] -> (T, attenuation, weights, keep).

    T is exclusive: T[:, 0] = 1 and T[:, i+1] = T[:, i] * attenuation[:, i].
    keep drops samples once T falls below eps_T.
    """
    od = np.where(valid, sigma * delta, 0.0)
    att = np.exp(-od)
    T = np.ones_like(od)
    if od.shape[1] > 1:
        T[:, 1:] = np.cumprod(att, axis=1)[:, :-1]
    keep = valid & (T >= eps_T)
    w = np.where(keep, T * -np.expm1(-od), 0.0)
    return T, att, w, keep


@dataclass(eq=False)
class RayWorkspace:
    """
    Everything the backward passes need for one rendered batch.

    Padded arrays are [M, N]; the kept-sample arrays are compact [K, ...] and index back
    into the padding through (k_ray, k_slot).
    """

    origins: np.ndarray
    dirs: np.ndarray
    basis: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    valid: np.ndarray
    keep: np.ndarray
    sigma: np.ndarray
    T: np.ndarray
    attenuation: np.ndarray
    w: np.ndarray
    rgb: np.ndarray

    k_ray: np.ndarray
    k_slot: np.ndarray
    corner_idx: np.ndarray
    corner_w: np.ndarray
    frac: np.ndarray
    sigma_raw: np.ndarray
    rgb_raw: np.ndarray
    sh: np.ndarray

    color: np.ndarray
    depth: np.ndarray
    T_final: np.ndarray
    hit: np.ndarray
    terminated: np.ndarray

    @property
    def num_rays(self) -> int:
        return int(self.origins.shape[0])

    @property
    def num_kept(self) -> int:
        return int(self.k_ray.size)

    @property
    def sigma_live(self) -> np.ndarray:
        return self.sigma_raw > 0.0

    @property
    def rgb_live(self) -> np.ndarray:
        return (self.rgb_raw > 0.0) & (self.rgb_raw < 1.0)

    @property
    def T_next(self) -> np.ndarray:
        return self.T * self.attenuation

    @property
    def positions(self) -> np.ndarray:
        """Kept sample positions [K, 3]."""
        return self.origins[self.k_ray] + self.t[self.k_ray, self.k_slot, None] * self.dirs[self.k_ray]


def render_rays(
    grid: VoxelGrid,
    origins: np.ndarray,
    dirs: np.ndarray,
    options: RenderOptions,
    *,
    samples: Optional[RaySamples] = None,
    basis: Optional[np.ndarray] = None,
) -> RayWorkspace:
    """
    Render a ray batch. A frozen `samples` schedule or `basis` may be passed in; both are
    otherwise derived from the rays.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    M = origins.shape[0]
    if samples is None:
        samples = sample_rays(grid, origins, dirs, options)
    if basis is None:
        basis = sh_basis(dirs)
    t, delta, valid = samples.t, samples.delta, samples.valid
    N = t.shape[1]

    vm, vn = np.nonzero(valid)
    p = origins[vm] + t[vm, vn, None] * dirs[vm]
    _, idx, cw, frac = grid.corner_weights(p, clamp=True)
    raw_sigma = np.einsum("kc,kc->k", cw, grid.params[idx, SIGMA].astype(np.float64))

    sigma = np.zeros((M, N))
    sigma[vm, vn] = np.maximum(raw_sigma, 0.0)
    T, att, w, keep = composite(sigma, delta, valid, options.eps_T)

    kept = keep[vm, vn]
    k_ray, k_slot = vm[kept], vn[kept]
    idx, cw, frac = idx[kept], cw[kept], frac[kept]
    sh = np.einsum("kc,kcs->ks", cw, grid.params[idx][:, :, SH_SLICE].astype(np.float64))
    sh = sh.reshape(-1, 3, SH_BASIS_DIM)
    rgb_raw = sh_raw_color(sh, basis[k_ray])
    rgb_k, rgb_live = color_activation(rgb_raw)

    rgb = np.zeros((M, N, 3))
    rgb[k_ray, k_slot] = rgb_k

    color = np.einsum("mn,mnc->mc", w, rgb)
    depth = np.einsum("mn,mn->m", w, t)
    T_final = np.prod(np.where(keep, att, 1.0), axis=1)

    return RayWorkspace(
        origins=origins,
        dirs=dirs,
        basis=basis,
        t=t,
        delta=delta,
        valid=valid,
        keep=keep,
        sigma=sigma,
        T=T,
        attenuation=att,
        w=w,
        rgb=rgb,
        k_ray=k_ray,
        k_slot=k_slot,
        corner_idx=idx,
        corner_w=cw,
        frac=frac,
        sigma_raw=raw_sigma[kept],
        rgb_raw=rgb_raw,
        sh=sh,
        color=color,
        depth=depth,
        T_final=T_final,
        hit=valid.any(axis=1),
        terminated=(valid & ~keep).any(axis=1),
    )


def render_ray(grid: VoxelGrid, ray: Ray, schedule: SampleSchedule, options: Optional[RenderOptions] = None):
    """Single-ray form -> (color [3], ray depth, workspace)."""
    if options is None:
        step = float(schedule.delta.max()) if len(schedule) else 1.0
        options = RenderOptions(step=step)
    ws = render_rays(grid, ray.o[None], ray.d[None], options, samples=RaySamples.from_schedule(schedule))
    return ws.color[0], float(ws.depth[0]), ws


# -----------------------------
# Pixels and images
# -----------------------------
def render_pixels(
    grid: VoxelGrid,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    u: np.ndarray,
    v: np.ndarray,
    options: RenderOptions,
    *,
    threads: int = 1,
    chunk: int = DEFAULT_CHUNK,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """-> (color [M, 3], z-depth [M] with 0 on no-hit, hit [M])."""
    origins, dirs, zf = generate_rays(intrinsics, pose, u, v)

    def _run(a: int, b: int):
        ws = render_rays(grid, origins[a:b], dirs[a:b], options)
        return ws.color, ws.depth, ws.hit

    parts = map_chunks(_run, chunk_ranges(len(origins), chunk), threads=threads, ordered=True)
    if not parts:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=bool)
    color = np.concatenate([p[0] for p in parts])
    depth = np.concatenate([p[1] for p in parts]) * zf
    hit = np.concatenate([p[2] for p in parts])
    depth[~hit] = 0.0
    return color, depth, hit


def render_image(
    grid: VoxelGrid,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    stride: int = 1,
    *,
    options: Optional[RenderOptions] = None,
    threads: int = 1,
    chunk: int = DEFAULT_CHUNK,
    timestamp: float = 0.0,
) -> Frame:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if options is None:
        options = RenderOptions.for_grid(grid)
    u, v = intrinsics.pixel_grid(stride)
    h = len(range(0, intrinsics.height, stride))
    w = len(range(0, intrinsics.width, stride))
    color, depth, hit = render_pixels(grid, intrinsics, pose, u, v, options, threads=threads, chunk=chunk)
    log.debug("[RENDER] %dx%d image, %d/%d rays hit", w, h, int(hit.sum()), hit.size)
    return Frame(color.reshape(h, w, 3), depth.reshape(h, w), timestamp=timestamp, gt_pose=pose)
