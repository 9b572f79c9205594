# src/gradients.py
"""
Analytical gradients of rendered color and depth.

Two backward paths share one RayWorkspace:
- map path: per-sample dL/dsigma and dL/dc, chained through the color clamp and the SH
  basis, then scattered to the 8 enclosing vertices
- ray path: the same per-sample factors contracted with the spatial gradient of the
  trilinear field at each sample, accumulated into dL/do and dL/dd per ray

Both paths honour the workspace truncation (early termination, occupancy, clamps).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from src.renderer import EPS_T, RayWorkspace, RenderOptions, render_rays, sample_rays
from src.sh import SH_BASIS_DIM, sh_basis, sh_basis_jacobian
from src.voxel_grid import (
    NUM_CHANNELS,
    SIGMA,
    GradientBuffer,
    GridGeometry,
    VoxelGrid,
    interp_coeffs,
    interp_poly_grad,
)

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class MapGradContribution:
    """Per kept sample (workspace order): dL/dsigma [K] and dL/dc [K, 3], before activations."""

    d_sigma: np.ndarray
    d_rgb: np.ndarray

    def __add__(self, other: "MapGradContribution") -> "MapGradContribution":
        return MapGradContribution(self.d_sigma + other.d_sigma, self.d_rgb + other.d_rgb)

    def scaled(self, s: float) -> "MapGradContribution":
        return MapGradContribution(self.d_sigma * s, self.d_rgb * s)

    @classmethod
    def zeros(cls, ws: RayWorkspace) -> "MapGradContribution":
        return cls(np.zeros(ws.num_kept), np.zeros((ws.num_kept, 3)))


@dataclass
class PoseGradContribution:
    """Per ray: dL/do [M, 3] and dL/dd [M, 3]."""

    d_origin: np.ndarray
    d_dir: np.ndarray

    def total_origin(self) -> np.ndarray:
        return self.d_origin.sum(axis=0)

    def total_dir(self) -> np.ndarray:
        return self.d_dir.sum(axis=0)


# -----------------------------
# Per-sample derivatives of the composite
# -----------------------------
def dcolor_dsigma(ws: RayWorkspace, *, form: str = "prefix") -> np.ndarray:
    """
    d C / d sigma_i for every padded sample -> [M, N, 3], zero outside the kept set.

    prefix: delta_i [c_i T_{i+1} - C + sum_{j<=i} c_j w_j]
    suffix: delta_i [c_i T_{i+1} - sum_{j>i} c_j w_j]
    """
    cw = ws.rgb * ws.w[..., None]
    Tn = ws.T_next[..., None]
    if form == "prefix":
        inner = ws.rgb * Tn - ws.color[:, None, :] + np.cumsum(cw, axis=1)
    elif form == "suffix":
        after = np.flip(np.cumsum(np.flip(cw, axis=1), axis=1), axis=1) - cw
        inner = ws.rgb * Tn - after
    else:
        raise ValueError(f"unknown form {form!r}")
    return np.where(ws.keep[..., None], ws.delta[..., None] * inner, 0.0)


def ddepth_dsigma(ws: RayWorkspace) -> np.ndarray:
    """d D / d sigma_i -> [M, N]: delta_i [t_i T_{i+1} - D + sum_{j<=i} t_j w_j]."""
    inner = ws.t * ws.T_next - ws.depth[:, None] + np.cumsum(ws.t * ws.w, axis=1)
    return np.where(ws.keep, ws.delta * inner, 0.0)


def grad_color_wrt_params(ws: RayWorkspace, upstream: np.ndarray) -> MapGradContribution:
    """upstream: dL/dC per ray [M, 3] -> per kept sample (dL/dsigma, dL/dc)."""
    up = np.asarray(upstream, dtype=np.float64).reshape(ws.num_rays, 3)
    d_sig = np.einsum("mnc,mc->mn", dcolor_dsigma(ws), up)
    r, s = ws.k_ray, ws.k_slot
    d_rgb = ws.w[r, s, None] * up[r]
    return MapGradContribution(d_sig[r, s], d_rgb)


def grad_depth_wrt_sigma(ws: RayWorkspace, upstream: np.ndarray) -> MapGradContribution:
    """upstream: dL/dD per ray [M] -> per kept sample dL/dsigma (no color term)."""
    up = np.asarray(upstream, dtype=np.float64).reshape(ws.num_rays)
    d_sig = ddepth_dsigma(ws) * up[:, None]
    return MapGradContribution(d_sig[ws.k_ray, ws.k_slot], np.zeros((ws.num_kept, 3)))


def render_contribution(
    ws: RayWorkspace,
    upstream_c: Optional[np.ndarray] = None,
    upstream_d: Optional[np.ndarray] = None,
) -> MapGradContribution:
    contrib = MapGradContribution.zeros(ws)
    if upstream_c is not None:
        contrib = contrib + grad_color_wrt_params(ws, upstream_c)
    if upstream_d is not None:
        contrib = contrib + grad_depth_wrt_sigma(ws, upstream_d)
    return contrib


def _raw_upstream(ws: RayWorkspace, contrib: MapGradContribution) -> np.ndarray:
    """Chain through density and color activations and the SH basis -> dL/d(raw channels) [K, 28]."""
    up = np.empty((ws.num_kept, NUM_CHANNELS))
    up[:, SIGMA] = contrib.d_sigma * ws.sigma_live
    d_rgb = contrib.d_rgb * ws.rgb_live
    up[:, 1:] = (d_rgb[:, :, None] * ws.basis[ws.k_ray][:, None, :]).reshape(-1, 3 * SH_BASIS_DIM)
    return up


# -----------------------------
# Map path
# -----------------------------
def backprop_to_vertices(
    grid: VoxelGrid,
    ws: RayWorkspace,
    contrib: MapGradContribution,
    buffer: Optional[GradientBuffer] = None,
) -> GradientBuffer:
    if buffer is None:
        buffer = GradientBuffer(grid.geometry.num_vertices)
    buffer.add(ws.corner_idx, ws.corner_w, _raw_upstream(ws, contrib))
    return buffer


# -----------------------------
# Ray path
# -----------------------------
def grad_wrt_ray(
    grid: VoxelGrid,
    ws: RayWorkspace,
    contrib: MapGradContribution,
    *,
    include_sh_direction: bool = False,
) -> PoseGradContribution:
    """
    dL/do = sum_i g_i and dL/dd = sum_i t_i g_i, g_i the upstream-weighted spatial gradient
    of the interpolated field at sample i. The SH basis is held fixed in d unless
    include_sh_direction is set.
    """
    M = ws.num_rays
    up = _raw_upstream(ws, contrib)

    # upstream-weighted corner values, one gather per channel
    s = np.zeros_like(ws.corner_w, dtype=np.float64)
    for c in range(NUM_CHANNELS):
        if np.any(up[:, c]):
            s += up[:, c, None] * grid.params[ws.corner_idx, c].astype(np.float64)
    g = interp_poly_grad(interp_coeffs(s), ws.frac) / grid.geometry.voxel_size

    t_k = ws.t[ws.k_ray, ws.k_slot]
    d_o = np.stack([np.bincount(ws.k_ray, weights=g[:, a], minlength=M) for a in range(3)], axis=1)
    d_d_k = t_k[:, None] * g

    if include_sh_direction and ws.num_kept:
        J = sh_basis_jacobian(ws.dirs)[ws.k_ray]  # [K, 9, 3]
        d_rgb = contrib.d_rgb * ws.rgb_live
        d_basis = np.einsum("kc,kcm->km", d_rgb, ws.sh)
        d_d_k = d_d_k + np.einsum("km,kma->ka", d_basis, J)

    d_d = np.stack([np.bincount(ws.k_ray, weights=d_d_k[:, a], minlength=M) for a in range(3)], axis=1)
    return PoseGradContribution(d_o, d_d)


# -----------------------------
# Finite-difference harness
# -----------------------------
def fd_safe(ws: RayWorkspace, margin: float = 1e-4, eps_T: float = EPS_T) -> bool:
    """
    False when a small perturbation could flip a discrete decision: a sample near a cell
    face, a density or color near its clamp, or transmittance near the cutoff.
    """
    frac_ok = np.all((ws.frac > margin) & (ws.frac < 1.0 - margin))
    sigma_ok = np.all(np.abs(ws.sigma_raw) > margin)
    rgb_ok = np.all((np.abs(ws.rgb_raw) > margin) & (np.abs(ws.rgb_raw - 1.0) > margin))
    T_ok = not np.any(np.abs(ws.T[ws.valid] / eps_T - 1.0) < 1e-2)
    return bool(frac_ok and sigma_ok and rgb_ok and T_ok)


@dataclass
class FDEntry:
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FDReport:
    entries: List[FDEntry] = field(default_factory=list)
    eps: float = 1e-6

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def worst(self) -> Optional[FDEntry]:
        return max(self.entries, key=lambda e: e.rel_err, default=None)

    def to_text(self) -> str:
        lines = [f"# fd_check eps={self.eps:.3g} n={len(self.entries)} max_rel_err={self.max_rel_err:.3e}"]
        lines.append(f"{'index':>8} {'analytic':>22} {'numeric':>22} {'rel_err':>12}")
        for e in self.entries:
            lines.append(f"{e.index:>8d} {e.analytic:>22.15e} {e.numeric:>22.15e} {e.rel_err:>12.3e}")
        w = self.worst
        if w is not None:
            lines.append(f"# worst index={w.index} rel_err={w.rel_err:.3e}")
        return "\n".join(lines)


def _finite(v: float, where: str) -> float:
    if not np.isfinite(v):
        raise NonFiniteLossError(f"loss is not finite ({v}) at {where}")
    return float(v)


def fd_check(
    scalar_loss: Callable[[], float],
    params: np.ndarray,
    analytic: np.ndarray,
    *,
    eps: float = 1e-6,
    indices: Optional[Sequence[int]] = None,
    floor: float = 1e-8,
) -> FDReport:
    """
    Central differences of scalar_loss() over entries of the flat float64 view `params`,
    which is perturbed in place and restored. rel_err = |a - n| / max(|a|, |n|, floor).
    """
    if params.dtype != np.float64:
        raise ValueError(f"fd_check needs a float64 parameter view, got {params.dtype}")
    flat = params.reshape(-1)
    if not np.shares_memory(flat, params):
        raise ValueError("params must be reshapeable to a flat view without copying")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    _finite(scalar_loss(), "base point")

    report = FDReport(eps=eps)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        i = int(i)
        x0 = flat[i]
        flat[i] = x0 + eps
        fp = _finite(scalar_loss(), f"index {i} (+eps)")
        flat[i] = x0 - eps
        fm = _finite(scalar_loss(), f"index {i} (-eps)")
        flat[i] = x0
        num = (fp - fm) / (2.0 * eps)
        a = float(analytic[i])
        rel = abs(a - num) / max(abs(a), abs(num), floor)
        report.entries.append(FDEntry(i, a, num, rel))
    log.debug("[GRADCHECK] %d entries, max rel err %.3e", len(report.entries), report.max_rel_err)
    return report


# -----------------------------
# End-to-end check on a random grid
# -----------------------------
@dataclass
class GradcheckResult:
    map_report: FDReport
    ray_report: FDReport
    n_rays: int
    resampled: int

    @property
    def max_rel_err(self) -> Tuple[float, float]:
        return self.map_report.max_rel_err, self.ray_report.max_rel_err

    def to_text(self) -> str:
        return "\n".join(
            [
                f"# gradcheck rays={self.n_rays} resampled={self.resampled}",
                "## map parameters",
                self.map_report.to_text(),
                "## ray parameters (origin xyz, direction xyz per ray; frozen schedule and SH basis)",
                self.ray_report.to_text(),
            ]
        )


def random_check_grid(cells: int, rng: np.random.Generator) -> VoxelGrid:
    """float64 unit-cube grid with positive densities and colors well inside (0, 1)."""
    geo = GridGeometry.cube(cells + 1, 1.0 / cells)
    params = np.zeros((geo.num_vertices, NUM_CHANNELS))
    params[:, SIGMA] = rng.uniform(0.5, 3.0, geo.num_vertices)
    sh = rng.uniform(-0.05, 0.05, (geo.num_vertices, 3, SH_BASIS_DIM))
    sh[:, :, 0] = rng.uniform(-0.6, 0.6, (geo.num_vertices, 3))
    params[:, 1:] = sh.reshape(geo.num_vertices, -1)
    return VoxelGrid(geo, params, dtype=np.float64)


def squared_loss(ws: RayWorkspace, target_c: np.ndarray, target_d: np.ndarray, lambda_d: float = 1.0):
    """Mean squared color + lambda_d * mean squared ray-distance error -> (loss, dL/dC, dL/dD)."""
    m = ws.num_rays
    rc = ws.color - target_c
    rd = ws.depth - target_d
    loss = float(np.sum(rc * rc) / m + lambda_d * np.sum(rd * rd) / m)
    return loss, 2.0 * rc / m, lambda_d * 2.0 * rd / m


def run_gradcheck(
    *,
    cells: int = 4,
    n_rays: int = 20,
    seed: int = 0,
    eps: float = 1e-6,
    floor: float = 1e-4,
    max_params: Optional[int] = None,
    max_resample: int = 1000,
) -> GradcheckResult:
    """
    Analytic vs central-difference gradients of a squared render loss on a random grid.
    Rays whose samples sit near a cell face, clamp or termination cutoff are redrawn.
    """
    rng = np.random.default_rng(seed)
    grid = random_check_grid(cells, rng)
    options = RenderOptions(step=0.37 * grid.geometry.voxel_size, t_near=0.05, t_far=10.0)

    origins, dirs = [], []
    resampled = 0
    while len(origins) < n_rays:
        o = rng.uniform(0.1, 0.9, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        ws = render_rays(grid, o[None], d[None], options)
        if ws.hit[0] and fd_safe(ws):
            origins.append(o)
            dirs.append(d)
        else:
            resampled += 1
            if resampled > max_resample:
                raise RuntimeError("could not draw enough rays away from discontinuities")
    origins = np.asarray(origins)
    dirs = np.asarray(dirs)
    target_c = rng.uniform(0.2, 0.8, (n_rays, 3))
    target_d = rng.uniform(0.2, 1.0, n_rays)

    samples = sample_rays(grid, origins, dirs, options)
    basis = sh_basis(dirs)

    def _render(o: np.ndarray = origins, d: np.ndarray = dirs) -> RayWorkspace:
        return render_rays(grid, o, d, options, samples=samples, basis=basis)

    ws = _render()
    _, up_c, up_d = squared_loss(ws, target_c, target_d)
    contrib = render_contribution(ws, up_c, up_d)
    buf = backprop_to_vertices(grid, ws, contrib)
    touched, _ = buf.reduce()
    analytic_map = buf.dense()

    flat_idx = (touched[:, None] * NUM_CHANNELS + np.arange(NUM_CHANNELS)[None, :]).reshape(-1)
    if max_params is not None and flat_idx.size > max_params:
        flat_idx = np.sort(rng.choice(flat_idx, size=max_params, replace=False))
    map_report = fd_check(
        lambda: squared_loss(_render(), target_c, target_d)[0],
        grid.params, analytic_map, eps=eps, indices=flat_idx, floor=floor,
    )

    ray_grad = grad_wrt_ray(grid, ws, contrib)
    ray_params = np.concatenate([origins, dirs], axis=1)
    analytic_ray = np.concatenate([ray_grad.d_origin, ray_grad.d_dir], axis=1)
    ray_report = fd_check(
        lambda: squared_loss(_render(ray_params[:, :3], ray_params[:, 3:]), target_c, target_d)[0],
        ray_params, analytic_ray, eps=eps, floor=floor,
    )
    log.info(
        "[GRADCHECK] %d rays, map max rel err %.3e (%d params), ray max rel err %.3e",
        n_rays, map_report.max_rel_err, len(map_report.entries), ray_report.max_rel_err,
    )
    return GradcheckResult(map_report, ray_report, n_rays, resampled)
