# src/dataset.py
"""
RGB-D sequences on disk and synthetic generators.

Directory layout:
    intrinsics.json          {fx, fy, cx, cy, width, height, depth_scale}
    color/%06d.png           8-bit rgb
    depth/%06d.png           16-bit, depth_scale units per meter, 0 = invalid
    poses.txt                TUM lines, optional
    depth_exact/%06d.png     optional noise-free depth
    metadata.json            generator provenance

Synthetic frames are quantized to the on-disk precision when generated, so a save/load
round-trip is bit-exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.ndimage import gaussian_filter

from src.camera import CameraIntrinsics, Frame
from src.pose import Pose, Trajectory, TrajectoryFormatError
from src.renderer import RenderOptions, generate_rays, ray_box_intersect, render_image
from src.sh import SH_BASIS_DIM, SH_C0
from src.utils.io import (
    ImageFormatError,
    quantize_color,
    quantize_depth,
    read_color_png,
    read_depth_png,
    read_json,
    write_color_png,
    write_depth_png,
    write_json,
)
from src.utils.parallel import map_chunks
from src.voxel_grid import SH_SLICE, SIGMA, GridGeometry, VoxelGrid

log = logging.getLogger(__name__)

DEFAULT_FPS = 30.0
FRAME_NAME = "{:06d}.png"

__all__ = [
    "Dataset",
    "DatasetError",
    "Frame",
    "GridSceneSpec",
    "SceneSpec",
    "load_dataset",
    "save_dataset",
    "synth_from_grid",
    "synth_from_primitives",
    "random_smooth_grid",
]


class DatasetError(ValueError):
    pass


# -----------------------------
# Container
# -----------------------------
@dataclass(eq=False)
class Dataset:
    intrinsics: CameraIntrinsics
    frames: List[Frame] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)
    depth_exact: Optional[List[np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def has_poses(self) -> bool:
        return bool(self.frames) and all(f.gt_pose is not None for f in self.frames)

    @property
    def timestamps(self) -> List[float]:
        return [f.timestamp for f in self.frames]

    def keyframe_indices(self, stride: int) -> List[int]:
        return list(range(0, len(self.frames), max(1, stride)))

    def heldout_indices(self, stride: int) -> List[int]:
        keys = set(self.keyframe_indices(stride))
        return [i for i in range(len(self.frames)) if i not in keys]

    def trajectory(self) -> Trajectory:
        if not self.has_poses:
            raise DatasetError("dataset has no ground-truth poses")
        return Trajectory([f.timestamp for f in self.frames], [f.gt_pose for f in self.frames])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        exact = None if self.depth_exact is None else [self.depth_exact[i] for i in indices]
        return Dataset(self.intrinsics, [self.frames[i] for i in indices], dict(self.metadata), exact)


# -----------------------------
# Disk I/O
# -----------------------------
def _frame_files(folder: Path) -> List[Path]:
    if not folder.is_dir():
        raise DatasetError(f"missing folder: {folder}")
    return sorted(folder.glob("*.png"))


def load_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    intr_path = root / "intrinsics.json"
    if not intr_path.exists():
        raise DatasetError(f"missing {intr_path}")
    try:
        intr = CameraIntrinsics.model_validate(read_json(intr_path))
    except (ValidationError, ValueError) as e:
        raise DatasetError(f"invalid intrinsics.json: {e}") from e

    color_files = _frame_files(root / "color")
    depth_files = _frame_files(root / "depth")
    if not color_files:
        raise DatasetError(f"no color frames in {root / 'color'}")
    if [p.name for p in color_files] != [p.name for p in depth_files]:
        raise DatasetError(
            f"color/depth frame sets differ ({len(color_files)} color, {len(depth_files)} depth)"
        )

    meta_path = root / "metadata.json"
    metadata = read_json(meta_path) if meta_path.exists() else {}

    poses: Optional[Trajectory] = None
    poses_path = root / "poses.txt"
    if poses_path.exists():
        try:
            poses = Trajectory.load_tum(poses_path)
        except TrajectoryFormatError as e:
            raise DatasetError(str(e)) from e
        if len(poses) != len(color_files):
            raise DatasetError(
                f"poses.txt has {len(poses)} poses but the dataset has {len(color_files)} frames"
            )
        timestamps = list(poses.timestamps)
    else:
        fps = float(metadata.get("fps", DEFAULT_FPS))
        timestamps = [i / fps for i in range(len(color_files))]

    frames: List[Frame] = []
    for i, (cp, dp) in enumerate(zip(color_files, depth_files)):
        try:
            color = read_color_png(cp)
            depth = read_depth_png(dp, intr.depth_scale)
        except ImageFormatError as e:
            raise DatasetError(str(e)) from e
        if color.shape[:2] != (intr.height, intr.width) or depth.shape != (intr.height, intr.width):
            raise DatasetError(
                f"frame {cp.name}: size {color.shape[1]}x{color.shape[0]} does not match "
                f"intrinsics {intr.width}x{intr.height}"
            )
        pose = poses.poses[i] if poses is not None else None
        frames.append(Frame(color, depth, timestamp=timestamps[i], gt_pose=pose))

    exact = None
    exact_dir = root / "depth_exact"
    if exact_dir.is_dir():
        exact_files = _frame_files(exact_dir)
        if len(exact_files) != len(frames):
            raise DatasetError(f"depth_exact has {len(exact_files)} frames, expected {len(frames)}")
        exact = [read_depth_png(p, intr.depth_scale) for p in exact_files]

    log.info("[IO] loaded %d frames from %s (poses: %s)", len(frames), root, poses is not None)
    return Dataset(intr, frames, metadata, exact)


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    intr = dataset.intrinsics
    write_json(root / "intrinsics.json", intr.model_dump())
    for i, f in enumerate(dataset.frames):
        if not f.matches(intr):
            raise DatasetError(f"frame {i} size does not match intrinsics")
        write_color_png(root / "color" / FRAME_NAME.format(i), f.color)
        write_depth_png(root / "depth" / FRAME_NAME.format(i), f.depth, intr.depth_scale)
    if dataset.depth_exact is not None:
        for i, d in enumerate(dataset.depth_exact):
            write_depth_png(root / "depth_exact" / FRAME_NAME.format(i), d, intr.depth_scale)
    if dataset.has_poses:
        dataset.trajectory().save_tum(root / "poses.txt")
    write_json(root / "metadata.json", dataset.metadata)
    log.info("[IO] wrote %d frames to %s", len(dataset), root)
    return root


def quantize_frame(color: np.ndarray, depth: np.ndarray, depth_scale: float) -> Tuple[np.ndarray, np.ndarray]:
    """Snap to the 8-bit / 16-bit file precision."""
    c = quantize_color(color).astype(np.float64) / 255.0
    d = quantize_depth(depth, depth_scale).astype(np.float64) / depth_scale
    return c, d


# -----------------------------
# Trajectory builders
# -----------------------------
def circle_trajectory(
    center: Sequence[float],
    radius: float,
    n: int,
    *,
    target: Optional[Sequence[float]] = None,
    arc_deg: float = 360.0,
    start_deg: float = 0.0,
    look_outward: bool = False,
) -> List[Pose]:
    """Horizontal circle around center; cameras look at target (default center) or outward."""
    c = np.asarray(center, dtype=np.float64)
    closed = abs(arc_deg) >= 360.0
    angles = np.deg2rad(start_deg + arc_deg * np.arange(n) / (n if closed else max(n - 1, 1)))
    poses = []
    for a in angles:
        eye = c + radius * np.array([np.cos(a), np.sin(a), 0.0])
        if look_outward:
            tgt = eye + np.array([np.cos(a), np.sin(a), 0.0])
        else:
            tgt = c if target is None else np.asarray(target, dtype=np.float64)
        poses.append(Pose.look_at(eye, tgt))
    return poses


def line_trajectory(
    start: Sequence[float], end: Sequence[float], n: int, *, target: Optional[Sequence[float]] = None
) -> List[Pose]:
    s = np.asarray(start, dtype=np.float64)
    e = np.asarray(end, dtype=np.float64)
    poses = []
    for a in np.linspace(0.0, 1.0, n):
        eye = s + a * (e - s)
        tgt = eye + (e - s) if target is None else np.asarray(target, dtype=np.float64)
        poses.append(Pose.look_at(eye, tgt))
    return poses


def waypoint_trajectory(
    waypoints: Sequence[Sequence[float]], n: int, *, target: Optional[Sequence[float]] = None
) -> List[Pose]:
    """n poses evenly spaced by arc length along the polyline through waypoints."""
    w = np.asarray(waypoints, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 2 or w.shape[1] != 3:
        raise ValueError("waypoints must be at least two 3D points")
    seg = np.linalg.norm(np.diff(w, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    q = np.linspace(0.0, s[-1], n)
    eyes = np.stack([np.interp(q, s, w[:, k]) for k in range(3)], axis=1)
    poses = []
    for i, eye in enumerate(eyes):
        if target is not None:
            tgt = np.asarray(target, dtype=np.float64)
        else:
            j = min(int(np.searchsorted(s, q[i], side="right")), len(w) - 1)
            tgt = w[j] if np.linalg.norm(w[j] - eye) > 1e-9 else eye + (w[-1] - w[-2])
        poses.append(Pose.look_at(eye, tgt))
    return poses


class TrajectorySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["circle", "line", "waypoints"] = "circle"
    num_frames: int = Field(20, ge=1)
    fps: float = Field(DEFAULT_FPS, gt=0)
    center: List[float] = Field(default_factory=lambda: [0.0, 0.0, 1.5])
    radius: float = Field(0.5, ge=0)
    arc_deg: float = 360.0
    look_outward: bool = True
    start: List[float] = Field(default_factory=lambda: [0.0, 0.0, 1.5])
    end: List[float] = Field(default_factory=lambda: [1.0, 0.0, 1.5])
    waypoints: List[List[float]] = Field(default_factory=list)
    target: Optional[List[float]] = None

    def build(self) -> List[Pose]:
        if self.kind == "circle":
            return circle_trajectory(
                self.center, self.radius, self.num_frames, target=self.target,
                arc_deg=self.arc_deg, look_outward=self.look_outward and self.target is None,
            )
        if self.kind == "line":
            return line_trajectory(self.start, self.end, self.num_frames, target=self.target)
        return waypoint_trajectory(self.waypoints, self.num_frames, target=self.target)

    def timestamps(self) -> List[float]:
        return [i / self.fps for i in range(self.num_frames)]


# -----------------------------
# Scene specs
# -----------------------------
Vec3 = List[float]


class Checker(BaseModel):
    model_config = ConfigDict(extra="forbid")

    period: float = Field(0.25, gt=0)
    albedo2: Vec3 = Field(default_factory=lambda: [0.1, 0.1, 0.1])


class Sphere(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center: Vec3
    radius: float = Field(..., gt=0)
    albedo: Vec3 = Field(default_factory=lambda: [0.8, 0.2, 0.2])
    texture: Optional[Checker] = None


class Box(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lo: Vec3
    hi: Vec3
    albedo: Vec3 = Field(default_factory=lambda: [0.2, 0.6, 0.2])
    texture: Optional[Checker] = None

    @model_validator(mode="after")
    def _ordered(self) -> "Box":
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"box lo {self.lo} must be below hi {self.hi} on every axis")
        return self


class CameraSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    width: int = Field(64, ge=2)
    height: int = Field(48, ge=2)
    fov_x_deg: float = Field(70.0, gt=0, lt=180)
    depth_scale: float = Field(1000.0, gt=0)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.fov_x_deg, self.depth_scale)


class SceneSpec(BaseModel):
    """Room interior (axis-aligned box) with embedded primitives, seen from a trajectory."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["primitives"] = "primitives"
    room_lo: Vec3 = Field(default_factory=lambda: [-2.0, -2.0, 0.0])
    room_hi: Vec3 = Field(default_factory=lambda: [2.0, 2.0, 3.0])
    # one albedo for all walls, or six: -x, +x, -y, +y, floor, ceiling
    wall_albedo: List[Vec3] = Field(default_factory=lambda: [[0.7, 0.7, 0.7]])
    wall_texture: Optional[Checker] = None
    spheres: List[Sphere] = Field(default_factory=list)
    boxes: List[Box] = Field(default_factory=list)
    trajectory: TrajectorySpec = Field(default_factory=TrajectorySpec)
    camera: CameraSpec = Field(default_factory=CameraSpec)
    depth_noise: float = Field(0.0, ge=0)
    dropout: float = Field(0.0, ge=0, le=1)
    seed: int = 0

    @field_validator("wall_albedo")
    @classmethod
    def _wall_count(cls, v: List[Vec3]) -> List[Vec3]:
        if len(v) not in (1, 6):
            raise ValueError("wall_albedo needs 1 or 6 colors")
        return v

    @model_validator(mode="after")
    def _room(self) -> "SceneSpec":
        if any(a >= b for a, b in zip(self.room_lo, self.room_hi)):
            raise ValueError("room_lo must be below room_hi on every axis")
        return self

    def walls(self) -> np.ndarray:
        a = np.asarray(self.wall_albedo, dtype=np.float64)
        return np.repeat(a, 6, axis=0) if a.shape[0] == 1 else a


class GridSceneSpec(BaseModel):
    """Dataset rendered from a voxel grid: a random smooth grid, or one loaded from grid_path."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["grid"] = "grid"
    grid_path: Optional[str] = None
    cells: int = Field(32, ge=1)
    lo: Vec3 = Field(default_factory=lambda: [-1.0, -1.0, -1.0])
    hi: Vec3 = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    smooth: float = Field(2.0, ge=0)
    density_scale: float = Field(20.0, gt=0)
    density_level: float = 0.5
    sh_scale: float = Field(0.3, ge=0)
    clear_radius: float = Field(0.3, ge=0)
    trajectory: TrajectorySpec = Field(default_factory=lambda: TrajectorySpec(center=[0.0, 0.0, 0.0], radius=0.3))
    camera: CameraSpec = Field(default_factory=CameraSpec)
    step_ratio: float = Field(0.5, gt=0)
    seed: int = 0


# -----------------------------
# Analytic ray casting
# -----------------------------
@dataclass
class PrimitiveHit:
    """Per ray: distance t (inf = no hit), hit point, albedo."""

    t: np.ndarray
    points: np.ndarray
    albedo: np.ndarray


def _checker(points: np.ndarray, base: np.ndarray, tex: Optional[Checker]) -> np.ndarray:
    out = np.broadcast_to(base, points.shape).copy()
    if tex is None:
        return out
    parity = np.floor(points / tex.period + 1e-9).astype(np.int64).sum(axis=1) % 2 == 1
    out[parity] = np.asarray(tex.albedo2, dtype=np.float64)
    return out


def _sphere_t(o: np.ndarray, d: np.ndarray, c: np.ndarray, r: float) -> np.ndarray:
    oc = o - c
    b = np.sum(oc * d, axis=1)
    cc = np.sum(oc * oc, axis=1) - r * r
    disc = b * b - cc
    t = np.full(len(o), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    near = np.where(t0 > 0, t0, t1)
    t[ok & (near > 0)] = near[ok & (near > 0)]
    return t


def _box_t(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    t_in, t_out = ray_box_intersect(o, d, lo, hi)
    t = np.full(len(o), np.inf)
    ok = (t_in <= t_out) & (t_in > 0)
    t[ok] = t_in[ok]
    return t


def _room_exit(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance to the room wall from inside, and the wall id (-x,+x,-y,+y,-z,+z -> 0..5)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        tb = np.where(d > 0, (hi - o) / d, np.where(d < 0, (lo - o) / d, np.inf))
    axis = np.argmin(tb, axis=1)
    t = tb[np.arange(len(o)), axis]
    positive = d[np.arange(len(o)), axis] > 0
    return t, 2 * axis + positive.astype(np.int64)


def cast_primitives(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> PrimitiveHit:
    lo = np.asarray(scene.room_lo, dtype=np.float64)
    hi = np.asarray(scene.room_hi, dtype=np.float64)
    t_room, wall = _room_exit(origins, dirs, lo, hi)
    best_t = t_room.copy()
    owner = np.full(len(origins), -1, dtype=np.int64)

    shapes: List[Tuple[np.ndarray, BaseModel]] = []
    for s in scene.spheres:
        shapes.append((_sphere_t(origins, dirs, np.asarray(s.center, dtype=np.float64), s.radius), s))
    for b in scene.boxes:
        shapes.append((_box_t(origins, dirs, np.asarray(b.lo, dtype=np.float64), np.asarray(b.hi, dtype=np.float64)), b))
    for k, (t, _) in enumerate(shapes):
        closer = t < best_t
        best_t[closer] = t[closer]
        owner[closer] = k

    points = origins + best_t[:, None] * dirs
    albedo = np.empty_like(points)
    walls = scene.walls()
    on_wall = owner < 0
    if np.any(on_wall):
        albedo[on_wall] = _checker(points[on_wall], walls[wall[on_wall]], scene.wall_texture)
    for k, (_, shp) in enumerate(shapes):
        sel = owner == k
        if np.any(sel):
            albedo[sel] = _checker(points[sel], np.asarray(shp.albedo, dtype=np.float64), shp.texture)
    return PrimitiveHit(best_t, points, albedo)


def _check_camera(scene: SceneSpec, pose: Pose, i: int) -> None:
    p = pose.translation
    lo = np.asarray(scene.room_lo)
    hi = np.asarray(scene.room_hi)
    if np.any(p <= lo) or np.any(p >= hi):
        raise DatasetError(f"trajectory pose {i} at {p} leaves the room")
    for s in scene.spheres:
        if np.linalg.norm(p - np.asarray(s.center)) <= s.radius:
            raise DatasetError(f"camera {i} is inside a sphere at {s.center}")
    for b in scene.boxes:
        if np.all(p >= np.asarray(b.lo)) and np.all(p <= np.asarray(b.hi)):
            raise DatasetError(f"camera {i} is inside a box {b.lo}..{b.hi}")


@dataclass
class SynthResult:
    dataset: Dataset
    ray_depth: List[np.ndarray]


def synth_from_primitives(scene: SceneSpec, *, threads: int = 1) -> SynthResult:
    """Ray-cast the scene; returns the quantized dataset and the exact ray-distance depth per frame."""
    intr = scene.camera.intrinsics()
    poses = scene.trajectory.build()
    stamps = scene.trajectory.timestamps()
    for i, p in enumerate(poses):
        _check_camera(scene, p, i)
    u, v = intr.pixel_grid(1)
    H, W = intr.height, intr.width

    def _one(i: int):
        o, d, zf = generate_rays(intr, poses[i], u, v)
        hit = cast_primitives(scene, o, d)
        z_exact = (hit.t * zf).reshape(H, W)
        z = z_exact.copy()
        rng = np.random.default_rng([scene.seed, i])
        if scene.depth_noise > 0:
            z = z + rng.normal(0.0, scene.depth_noise, size=z.shape)
        if scene.dropout > 0:
            z[rng.random(z.shape) < scene.dropout] = 0.0
        z = np.maximum(z, 0.0)
        color, depth = quantize_frame(hit.albedo.reshape(H, W, 3), z, intr.depth_scale)
        _, exact = quantize_frame(color, z_exact, intr.depth_scale)
        return Frame(color, depth, timestamp=stamps[i], gt_pose=poses[i]), exact, hit.t.reshape(H, W)

    out = map_chunks(lambda a, b: _one(a), [(i, i + 1) for i in range(len(poses))], threads=threads, ordered=True)
    meta = {"generator": "primitives", "seed": scene.seed, "fps": scene.trajectory.fps, "spec": scene.model_dump()}
    ds = Dataset(intr, [o[0] for o in out], meta, [o[1] for o in out])
    log.info("[SYNTH] %d primitive-scene frames at %dx%d", len(ds), W, H)
    return SynthResult(ds, [o[2] for o in out])


# -----------------------------
# Grid scenes
# -----------------------------
def random_smooth_grid(
    geometry: GridGeometry,
    *,
    seed: int = 0,
    smooth: float = 2.0,
    density_scale: float = 20.0,
    density_level: float = 0.5,
    sh_scale: float = 0.3,
    clear_points: Optional[np.ndarray] = None,
    clear_radius: float = 0.0,
    dtype: np.dtype | str = np.float32,
) -> VoxelGrid:
    """
    Gaussian-smoothed noise. Raw density is density_scale * (n - density_level) for a unit-std
    field n, so roughly the upper tail becomes solid. The DC color term is kept inside (0, 1).
    Vertices within clear_radius of clear_points get zero density.
    """
    rng = np.random.default_rng(seed)
    nx, ny, nz = geometry.resolution

    def _field() -> np.ndarray:
        f = rng.standard_normal((nz, ny, nx))
        if smooth > 0:
            f = gaussian_filter(f, smooth, mode="wrap")
        s = f.std()
        return (f - f.mean()) / (s if s > 0 else 1.0)

    params = np.zeros((geometry.num_vertices, 1 + 3 * SH_BASIS_DIM))
    params[:, SIGMA] = density_scale * (_field().reshape(-1) - density_level)
    sh = np.zeros((geometry.num_vertices, 3, SH_BASIS_DIM))
    for c in range(3):
        # DC color in roughly [0.15, 0.85]
        sh[:, c, 0] = np.tanh(_field().reshape(-1)) * 0.35 / SH_C0
        for m in range(1, SH_BASIS_DIM):
            sh[:, c, m] = sh_scale * 0.1 * _field().reshape(-1)
    params[:, SH_SLICE] = sh.reshape(geometry.num_vertices, -1)

    if clear_points is not None and clear_radius > 0:
        nxg, nyg, nzg = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        ijk = np.stack([nxg, nyg, nzg], axis=-1).reshape(-1, 3)
        pts = geometry.grid_to_world(ijk)
        vidx = geometry.vertex_index(ijk)
        for c in np.atleast_2d(clear_points):
            near = np.linalg.norm(pts - c, axis=1) < clear_radius
            params[vidx[near], SIGMA] = np.minimum(params[vidx[near], SIGMA], 0.0)

    grid = VoxelGrid(geometry, params, dtype=dtype)
    grid.refresh_occupancy()
    return grid


def synth_from_grid(
    grid: VoxelGrid,
    poses: Sequence[Pose],
    intrinsics: CameraIntrinsics,
    *,
    timestamps: Optional[Sequence[float]] = None,
    options: Optional[RenderOptions] = None,
    threads: int = 1,
    metadata: Optional[Dict[str, Any]] = None,
) -> Dataset:
    if options is None:
        options = RenderOptions.for_grid(grid)
    if timestamps is None:
        timestamps = [i / DEFAULT_FPS for i in range(len(poses))]
    frames = []
    exact = []
    for i, pose in enumerate(poses):
        img = render_image(grid, intrinsics, pose, 1, options=options, threads=threads, timestamp=timestamps[i])
        color, depth = quantize_frame(img.color, img.depth, intrinsics.depth_scale)
        frames.append(Frame(color, depth, timestamp=timestamps[i], gt_pose=pose))
        exact.append(depth.copy())
    meta = {"generator": "grid", "grid_checksum": grid.checksum(), "fps": DEFAULT_FPS}
    meta.update(metadata or {})
    log.info("[SYNTH] rendered %d frames from grid %s", len(frames), grid.geometry.resolution)
    return Dataset(intrinsics, frames, meta, exact)


def synth_from_grid_spec(spec: GridSceneSpec, *, threads: int = 1) -> Tuple[Dataset, VoxelGrid]:
    poses = spec.trajectory.build()
    if spec.grid_path:
        grid = VoxelGrid.load(spec.grid_path)
    else:
        geo = GridGeometry.from_bounds(spec.lo, spec.hi, spec.cells, margin=0.0)
        grid = random_smooth_grid(
            geo,
            seed=spec.seed,
            smooth=spec.smooth,
            density_scale=spec.density_scale,
            density_level=spec.density_level,
            sh_scale=spec.sh_scale,
            clear_points=np.stack([p.translation for p in poses]),
            clear_radius=spec.clear_radius,
        )
    for i, p in enumerate(poses):
        if not bool(grid.geometry.contains(p.translation[None])[0]):
            raise DatasetError(f"trajectory pose {i} at {p.translation} is outside the grid")
    intr = spec.camera.intrinsics()
    options = RenderOptions.for_grid(grid, step_ratio=spec.step_ratio)
    ds = synth_from_grid(
        grid, poses, intr,
        timestamps=spec.trajectory.timestamps(), options=options, threads=threads,
        metadata={"seed": spec.seed, "fps": spec.trajectory.fps, "spec": spec.model_dump()},
    )
    return ds, grid


def load_scene_spec(path: str | Path) -> SceneSpec | GridSceneSpec:
    """JSON scene file; "kind" selects primitives (default) or grid."""
    try:
        raw = read_json(path)
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read scene spec {path}: {e}") from e
    try:
        if raw.get("kind") == "grid":
            return GridSceneSpec.model_validate(raw)
        return SceneSpec.model_validate(raw)
    except ValidationError as e:
        raise DatasetError(f"invalid scene spec {path}: {e}") from e
