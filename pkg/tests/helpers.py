from __future__ import annotations

from typing import List, Optional

import numpy as np

from src.camera import CameraIntrinsics
from src.dataset import Dataset, circle_trajectory, random_smooth_grid, synth_from_grid
from src.gradients import random_check_grid
from src.pose import Pose
from src.voxel_grid import GridGeometry, VoxelGrid


def small_intrinsics(width: int = 16, height: int = 12, fov_x_deg: float = 70.0) -> CameraIntrinsics:
    return CameraIntrinsics.from_fov(width, height, fov_x_deg)


def random_grid(cells: int = 4, seed: int = 0) -> VoxelGrid:
    """float64 unit-cube grid, every cell active."""
    return random_check_grid(cells, np.random.default_rng(seed))


def opaque_grid(cells: int = 4, seed: int = 0) -> VoxelGrid:
    """Unit cube dense enough that rays from the center terminate before leaving it."""
    rng = np.random.default_rng(seed)
    grid = random_check_grid(cells, rng)
    grid.params[:, 0] = rng.uniform(30.0, 50.0, grid.geometry.num_vertices)
    return grid


def circle_poses(n: int, radius: float = 0.3) -> List[Pose]:
    return circle_trajectory([0.0, 0.0, 0.0], radius, n, look_outward=True)


def smooth_scene(
    n_frames: int = 3,
    cells: int = 8,
    seed: int = 0,
    intrinsics: Optional[CameraIntrinsics] = None,
) -> tuple[Dataset, VoxelGrid]:
    """Small dataset rendered from a random smooth grid around the origin."""
    poses = circle_poses(n_frames)
    geo = GridGeometry.from_bounds([-1.0] * 3, [1.0] * 3, cells, margin=0.0)
    grid = random_smooth_grid(
        geo,
        seed=seed,
        smooth=1.0,
        clear_points=np.stack([p.translation for p in poses]),
        clear_radius=0.35,
        dtype=np.float64,
    )
    intr = intrinsics or small_intrinsics()
    return synth_from_grid(grid, poses, intr), grid
