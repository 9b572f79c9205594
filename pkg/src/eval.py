# src/eval.py
"""
Map and trajectory metrics.

- PSNR (peak 1.0, capped at 99 dB) and depth L1 over sampled pixels of held-out views
- ATE: nearest-timestamp association (0.02 s), optional rigid alignment without scale
- RPE: 1 m path-length intervals on the reference, translation (m) and rotation (deg)
- speed/accuracy sweep over tracking ray budgets and iteration counts
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from src.config import TrackingConfig
from src.dataset import Dataset
from src.pose import Pose, Trajectory
from src.renderer import RenderOptions, render_pixels
from src.tracking import track_sequence
from src.utils.io import export_csv, write_json
from src.voxel_grid import VoxelGrid

log = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0
ASSOC_MAX_DT = 0.02
SWEEP_COLUMNS = ["rays", "iters", "ate_m", "ate_std_m", "rpe_t_m", "rpe_r_deg", "ms_per_frame"]

__all__ = ["Trajectory", "MetricReport", "psnr", "depth_l1", "ate_rmse", "rpe", "speed_accuracy_sweep"]


class MetricError(ValueError):
    pass


# -----------------------------
# Image metrics
# -----------------------------
def psnr(rendered: np.ndarray, reference: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """10 log10(1 / MSE), MSE averaged over channels and (masked) pixels."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    a = a.reshape(-1, a.shape[-1]) if a.ndim > 1 else a.reshape(-1, 1)
    b = b.reshape(a.shape)
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        a, b = a[m], b[m]
    if a.size == 0:
        raise MetricError("psnr over an empty sample")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, -10.0 * np.log10(mse)))


def depth_l1(rendered: np.ndarray, reference: np.ndarray, valid: Optional[np.ndarray] = None) -> float:
    a = np.asarray(rendered, dtype=np.float64).reshape(-1)
    b = np.asarray(reference, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    m = b > 0 if valid is None else np.asarray(valid, dtype=bool).reshape(-1)
    if not np.any(m):
        raise MetricError("depth_l1 over an empty mask")
    return float(np.mean(np.abs(a[m] - b[m])))


# -----------------------------
# Trajectory metrics
# -----------------------------
def associate(est: Trajectory, ref: Trajectory, max_dt: float = ASSOC_MAX_DT) -> List[Tuple[int, int]]:
    """Greedy 1:1 nearest-timestamp matching within max_dt, sorted by reference index."""
    te = np.asarray(est.timestamps)
    tr = np.asarray(ref.timestamps)
    if te.size == 0 or tr.size == 0:
        return []
    dt = np.abs(te[:, None] - tr[None, :])
    cand = np.argwhere(dt <= max_dt)
    order = np.argsort(dt[cand[:, 0], cand[:, 1]], kind="stable")
    used_e, used_r = set(), set()
    pairs = []
    for i, j in cand[order]:
        if i in used_e or j in used_r:
            continue
        used_e.add(int(i))
        used_r.add(int(j))
        pairs.append((int(i), int(j)))
    return sorted(pairs, key=lambda p: p[1])


def align_rigid(src: np.ndarray, dst: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """R, t minimizing sum |R src + t - dst|^2 (no scale) via SVD of the cross-covariance."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def _matched(est: Trajectory, ref: Trajectory) -> Tuple[List[Pose], List[Pose]]:
    pairs = associate(est, ref)
    if len(pairs) < 2:
        raise MetricError(f"need at least 2 associated poses, got {len(pairs)}")
    return [est.poses[i] for i, _ in pairs], [ref.poses[j] for _, j in pairs]


def ate_errors(est: Trajectory, ref: Trajectory, align: bool = True) -> np.ndarray:
    """Per-pose translation residuals (m) after optional rigid alignment."""
    pe, pr = _matched(est, ref)
    P = np.stack([p.translation for p in pe])
    Q = np.stack([p.translation for p in pr])
    if align:
        R, t = align_rigid(P, Q)
        P = P @ R.T + t
    return np.linalg.norm(P - Q, axis=1)


def ate_rmse(est: Trajectory, ref: Trajectory, align: bool = True) -> float:
    e = ate_errors(est, ref, align)
    return float(np.sqrt(np.mean(e * e)))


def rotation_angle_deg(R: np.ndarray) -> float:
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def rpe(est: Trajectory, ref: Trajectory, interval: float = 1.0) -> Tuple[float, float]:
    """RMSE of relative-pose translation (m) and rotation (deg) over reference path intervals."""
    pe, pr = _matched(est, ref)
    Q = np.stack([p.translation for p in pr])
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(Q, axis=0), axis=1))])
    errs_t, errs_r = [], []
    for i in range(len(pr)):
        j = int(np.searchsorted(s, s[i] + interval - 1e-12, side="left"))
        if j >= len(pr):
            break
        dq = pr[i].inverse().compose(pr[j])
        dp = pe[i].inverse().compose(pe[j])
        E = dq.inverse().compose(dp).as_matrix()
        errs_t.append(np.linalg.norm(E[:3, 3]))
        errs_r.append(rotation_angle_deg(E[:3, :3]))
    if not errs_t:
        raise MetricError(f"no pose pairs {interval} m apart (reference path {s[-1]:.3f} m)")
    t = np.asarray(errs_t)
    r = np.asarray(errs_r)
    return float(np.sqrt(np.mean(t * t))), float(np.sqrt(np.mean(r * r)))


# -----------------------------
# Reports
# -----------------------------
@dataclass
class MetricReport:
    """None marks a metric that was not computed."""

    psnr: Optional[float] = None
    depth_l1: Optional[float] = None
    ate_rmse: Optional[float] = None
    ate_rmse_unaligned: Optional[float] = None
    rpe_t: Optional[float] = None
    rpe_r: Optional[float] = None
    n_images: int = 0
    n_pixels: int = 0
    n_depth_pixels: int = 0
    n_poses: int = 0

    _UNITS = {
        "psnr": "dB",
        "depth_l1": "m",
        "ate_rmse": "m",
        "ate_rmse_unaligned": "m",
        "rpe_t": "m",
        "rpe_r": "deg",
    }

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def save_json(self, path: str | Path) -> Path:
        return write_json(path, self.to_dict())

    def to_table(self) -> str:
        rows = []
        for k, unit in self._UNITS.items():
            v = getattr(self, k)
            rows.append((k, "n/a" if v is None else f"{v:.6f}", unit))
        for k in ("n_images", "n_pixels", "n_depth_pixels", "n_poses"):
            rows.append((k, str(getattr(self, k)), ""))
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        return "\n".join(f"{a:<{w0}}  {b:>{w1}}  {c}".rstrip() for a, b, c in rows)

    def merged(self, other: "MetricReport") -> "MetricReport":
        out = MetricReport(**self.to_dict())
        for k, v in other.to_dict().items():
            if v not in (None, 0):
                setattr(out, k, v)
        return out


def evaluate_map(
    grid: VoxelGrid,
    dataset: Dataset,
    *,
    indices: Optional[Sequence[int]] = None,
    n_images: int = 10,
    n_pixels: int = 10_000,
    seed: int = 0,
    options: Optional[RenderOptions] = None,
    threads: int = 1,
) -> MetricReport:
    """PSNR and depth L1 on n_pixels random pixels from each of n_images random frames."""
    if options is None:
        options = RenderOptions.for_grid(grid)
    pool = list(range(len(dataset))) if indices is None else list(indices)
    if not pool:
        raise MetricError("no frames to evaluate")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(pool, size=min(n_images, len(pool)), replace=False).tolist())
    intr = dataset.intrinsics

    pred_c, ref_c, pred_d, ref_d = [], [], [], []
    for f in chosen:
        frame = dataset.frames[f]
        if frame.gt_pose is None:
            raise MetricError(f"frame {f} has no pose")
        u = rng.integers(0, intr.width, size=n_pixels)
        v = rng.integers(0, intr.height, size=n_pixels)
        c, d, _ = render_pixels(grid, intr, frame.gt_pose, u, v, options, threads=threads)
        pred_c.append(c)
        ref_c.append(frame.color[v, u])
        pred_d.append(d)
        ref_d.append(frame.depth[v, u])
    pc, rc = np.concatenate(pred_c), np.concatenate(ref_c)
    pd, rd = np.concatenate(pred_d), np.concatenate(ref_d)
    valid = rd > 0
    report = MetricReport(
        psnr=psnr(pc, rc),
        depth_l1=depth_l1(pd, rd, valid) if np.any(valid) else None,
        n_images=len(chosen),
        n_pixels=int(pc.shape[0]),
        n_depth_pixels=int(valid.sum()),
    )
    log.info("[EVAL] map: psnr %.2f dB, depth L1 %s m over %d images", report.psnr,
             "n/a" if report.depth_l1 is None else f"{report.depth_l1:.4f}", report.n_images)
    return report


def evaluate_trajectory(est: Trajectory, ref: Trajectory, *, interval: float = 1.0) -> MetricReport:
    report = MetricReport(
        ate_rmse=ate_rmse(est, ref, align=True),
        ate_rmse_unaligned=ate_rmse(est, ref, align=False),
        n_poses=len(associate(est, ref)),
    )
    try:
        report.rpe_t, report.rpe_r = rpe(est, ref, interval)
    except MetricError as e:
        log.warning("[EVAL] rpe unavailable: %s", e)
    log.info("[EVAL] trajectory: ATE %.4f m (unaligned %.4f m)", report.ate_rmse, report.ate_rmse_unaligned)
    return report


# -----------------------------
# Sweep
# -----------------------------
def _rank_correlation(x: np.ndarray, y: np.ndarray) -> float:
    ok = np.isfinite(y)
    if ok.sum() < 2 or np.unique(x[ok]).size < 2:
        return float("nan")
    return float(spearmanr(x[ok], y[ok]).statistic)


@dataclass
class SweepResult:
    rows: List[Dict[str, float]] = field(default_factory=list)
    spearman: float = float("nan")
    spearman_budget: float = float("nan")

    def save_csv(self, path: str | Path, header_comment: Optional[str] = None) -> Path:
        return export_csv(self.rows, path, SWEEP_COLUMNS, header_comment=header_comment)


def speed_accuracy_sweep(
    grid: VoxelGrid,
    dataset: Dataset,
    ray_counts: Sequence[int],
    iteration_counts: Sequence[int],
    config: TrackingConfig,
    *,
    repeats: int = 1,
    rpe_interval: float = 1.0,
    threads: int = 1,
) -> SweepResult:
    """
    One row per (rays, iters). Failed settings get NaN metrics.

    ate_m is the mean aligned ATE over repeats. ate_std_m is the std of the per-frame aligned
    errors of all repeats pooled together, not the spread of ate_m across runs.

    spearman ranks settings by rays per iteration against ate_m; spearman_budget ranks them by
    rays x iters. With a single iteration count the two agree.
    """
    ref = dataset.trajectory()
    result = SweepResult()
    for rays, iters in itertools.product(ray_counts, iteration_counts):
        ates, errs, rts, rrs, ms = [], [], [], [], []
        try:
            for r in range(repeats):
                cfg = config.model_copy(update={"rays_per_iteration": int(rays), "iterations": int(iters), "seed": config.seed + r})
                seq = track_sequence(grid, dataset.frames, dataset.intrinsics, cfg, threads=threads)
                e = ate_errors(seq.trajectory, ref, align=True)
                errs.append(e)
                ates.append(float(np.sqrt(np.mean(e * e))))
                try:
                    t, a = rpe(seq.trajectory, ref, rpe_interval)
                except MetricError:
                    t, a = float("nan"), float("nan")
                rts.append(t)
                rrs.append(a)
                ms.append(seq.ms_per_frame)
            row = {
                "rays": int(rays),
                "iters": int(iters),
                "ate_m": float(np.mean(ates)),
                "ate_std_m": float(np.std(np.concatenate(errs))),
                "rpe_t_m": float(np.mean(rts)),
                "rpe_r_deg": float(np.mean(rrs)),
                "ms_per_frame": float(np.mean(ms)),
            }
        except (RuntimeError, ValueError) as e:
            log.error("[SWEEP] rays=%d iters=%d failed: %s", rays, iters, e)
            row = {"rays": int(rays), "iters": int(iters), **{k: float("nan") for k in SWEEP_COLUMNS[2:]}}
        result.rows.append(row)
        log.info("[SWEEP] rays=%d iters=%d ate=%.4f m ms/frame=%.1f", rays, iters, row["ate_m"], row["ms_per_frame"])

    per_iter = np.array([r["rays"] for r in result.rows], dtype=np.float64)
    budget = np.array([r["rays"] * r["iters"] for r in result.rows], dtype=np.float64)
    ate = np.array([r["ate_m"] for r in result.rows])
    result.spearman = _rank_correlation(per_iter, ate)
    result.spearman_budget = _rank_correlation(budget, ate)
    log.info("[SWEEP] spearman(rays, ATE) = %.3f, spearman(rays x iters, ATE) = %.3f", result.spearman, result.spearman_budget)
    return result


def save_report(report: MetricReport, path: str | Path) -> Path:
    p = report.save_json(path)
    Path(p).with_suffix(".txt").write_text(report.to_table() + "\n", encoding="utf-8")
    return p
