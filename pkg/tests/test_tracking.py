import numpy as np
import pytest

from src.camera import Frame
from src.config import TrackingConfig
from src.gradients import fd_check, fd_safe
from src.pose import Pose, PosePerturbation
from src.renderer import RenderOptions, generate_rays, render_image, render_rays
from src.tracking import (
    UntrackableFrameError,
    check_first_frame,
    pose_gradient,
    predict_pose,
    rotation_gradient,
    track_frame,
    track_sequence,
    write_status_csv,
)
from src.utils.io import read_csv
from src.sh import SH_BASIS_DIM
from src.voxel_grid import NUM_CHANNELS, SH_SLICE, GridGeometry, VoxelGrid

from tests.helpers import opaque_grid, small_intrinsics, smooth_scene


def _exact_frame(grid, intr, pose):
    """Unquantized render at the default tracking options."""
    img = render_image(grid, intr, pose)
    return Frame(img.color, img.depth, gt_pose=pose)


def _dc_only(grid):
    """Copy with the view-dependent SH bands zeroed."""
    out = grid.copy()
    sh = out.params[:, SH_SLICE].reshape(-1, 3, SH_BASIS_DIM).copy()
    sh[:, :, 1:] = 0.0
    out.params[:, SH_SLICE] = sh.reshape(-1, 3 * SH_BASIS_DIM)
    out.refresh_occupancy()
    return out


def _quarter_turn(grid, shift):
    """Grid contents rotated 90 deg about +z through the origin, then shifted; needs a grid centered on the z axis."""
    geo = grid.geometry
    vol = grid.volume()[:, ::-1, :, :].transpose(0, 2, 1, 3)
    moved_geo = GridGeometry(geo.resolution, tuple(geo.origin_array + shift), geo.voxel_size)
    out = VoxelGrid(moved_geo, np.ascontiguousarray(vol).reshape(-1, NUM_CHANNELS), dtype=grid.dtype)
    out.refresh_occupancy()
    return out


def test_ground_truth_is_a_fixed_point():
    ds, grid = smooth_scene()
    pose = ds.frames[1].gt_pose
    frame = _exact_frame(grid, ds.intrinsics, pose)
    cfg = TrackingConfig(iterations=10, rays_per_iteration=128)
    res = track_frame(grid, frame, pose, cfg, ds.intrinsics)
    assert res.first_loss < 1e-20
    assert res.pose.distance_to(pose) < 1e-12
    assert res.pose.angle_to(pose) < 1e-12


def test_zero_iterations_returns_init():
    ds, grid = smooth_scene()
    init = PosePerturbation(np.array([0.01, 0.0, 0.0]), np.array([0.0, 0.02, 0.0])).apply(ds.frames[1].gt_pose)
    res = track_frame(grid, ds.frames[1], init, TrackingConfig(iterations=0), ds.intrinsics)
    assert res.pose is init
    assert res.iterations == 0


def test_rotation_gradient_is_tangential():
    d = np.array([[0.0, 0.0, 1.0]])
    assert not rotation_gradient(d, np.array([[0.0, 0.0, 5.0]])).any()
    assert np.allclose(rotation_gradient(d, np.array([[1.0, 0.0, 0.0]])), [0.0, 1.0, 0.0])


def test_pose_gradient_matches_finite_differences():
    grid = opaque_grid(4, seed=0)
    intr = small_intrinsics()
    pose = Pose.look_at([0.5, 0.5, 0.5], [0.9, 0.7, 0.6])
    cfg = TrackingConfig(include_sh_direction=True)
    options = RenderOptions.for_grid(grid, step_ratio=0.37)

    u, v = intr.pixel_grid(3)
    o, d, _ = generate_rays(intr, pose, u, v)
    safe = [i for i in range(len(u)) if fd_safe(render_rays(grid, o[i:i + 1], d[i:i + 1], options))]
    assert len(safe) >= 5
    u, v = u[safe], v[safe]

    rng = np.random.default_rng(0)
    frame = Frame(rng.uniform(0.2, 0.8, (intr.height, intr.width, 3)), rng.uniform(0.1, 0.5, (intr.height, intr.width)))
    g = pose_gradient(grid, frame, pose, intr, u, v, cfg, options=options)
    xi = np.zeros(6)

    def loss():
        return pose_gradient(grid, frame, PosePerturbation.from_vector(xi).apply(pose), intr, u, v, cfg, options=options).loss

    rep = fd_check(loss, xi, g.vector, eps=1e-6, floor=1e-4)
    assert rep.max_rel_err < 1e-3, rep.to_text()


def test_predict_pose_policies():
    p0 = Pose.identity()
    p1 = Pose.from_rotvec([0.0, 0.0, np.deg2rad(10.0)], [1.0, 0.0, 0.0])
    assert predict_pose([p0, p1], "previous") is p1
    assert predict_pose([p1], "constant_velocity") is p1
    p2 = predict_pose([p0, p1], "constant_velocity")
    assert np.rad2deg(p2.angle_to(p0)) == pytest.approx(20.0)
    expected = p1.R @ np.array([1.0, 0.0, 0.0]) + p1.translation
    assert np.allclose(p2.translation, expected)


def test_first_frame_check():
    ds, grid = smooth_scene()
    assert check_first_frame(grid, ds.frames[0], ds.frames[0].gt_pose, ds.intrinsics) > 0
    empty = VoxelGrid.constant(GridGeometry.cube(3, 0.5), sigma=0.0)
    with pytest.raises(UntrackableFrameError):
        check_first_frame(empty, ds.frames[0], Pose.identity(), ds.intrinsics)


def test_frame_without_depth_is_untrackable():
    ds, grid = smooth_scene()
    f = ds.frames[1]
    blank = Frame(f.color, np.zeros_like(f.depth), timestamp=f.timestamp)
    with pytest.raises(UntrackableFrameError):
        track_frame(grid, blank, f.gt_pose, TrackingConfig(iterations=3), ds.intrinsics)


def test_sequence_leaves_grid_untouched(tmp_path):
    ds, grid = smooth_scene()
    checksum = grid.checksum()
    frames = list(ds.frames)
    frames[2] = Frame(frames[2].color, np.zeros_like(frames[2].depth), timestamp=frames[2].timestamp)
    cfg = TrackingConfig(iterations=3, rays_per_iteration=64)
    res = track_sequence(grid, frames, ds.intrinsics, cfg)
    assert grid.checksum() == checksum
    assert len(res.trajectory) == len(frames)
    assert res.trajectory.poses[0] is frames[0].gt_pose
    assert [s.failed for s in res.statuses] == [False, False, True]
    assert res.num_failed == 1

    path = write_status_csv(res.statuses, tmp_path / "status.csv", header_comment="config {}")
    rows = read_csv(path)
    assert [r["failed"] for r in rows] == ["0", "0", "1"]
    assert rows[0]["iterations"] == "0"


def test_sequence_is_deterministic():
    ds, grid = smooth_scene()
    cfg = TrackingConfig(iterations=4, rays_per_iteration=64, seed=3)
    a = track_sequence(grid, ds.frames, ds.intrinsics, cfg)
    b = track_sequence(grid, ds.frames, ds.intrinsics, cfg)
    assert a.trajectory.to_tum_lines() == b.trajectory.to_tum_lines()


@pytest.mark.slow
def test_recovers_small_perturbation():
    ds, grid = smooth_scene(cells=16, intrinsics=small_intrinsics(48, 36))
    pose = ds.frames[1].gt_pose
    frame = _exact_frame(grid, ds.intrinsics, pose)
    init = PosePerturbation(np.deg2rad([0.5, -0.3, 0.2]), np.array([0.01, -0.005, 0.008])).apply(pose)
    cfg = TrackingConfig(iterations=200, rays_per_iteration=1024)
    res = track_frame(grid, frame, init, cfg, ds.intrinsics)
    assert not res.failed
    assert res.pose.distance_to(pose) < 0.5 * init.distance_to(pose)
    assert res.pose.angle_to(pose) < 0.5 * init.angle_to(pose)


def test_estimate_follows_a_rigid_move_of_map_and_start():
    ds, grid = smooth_scene()
    base = _dc_only(grid)
    pose = ds.frames[1].gt_pose
    frame = _exact_frame(base, ds.intrinsics, pose)
    init = PosePerturbation(np.deg2rad([0.8, -0.5, 0.6]), np.array([0.02, -0.01, 0.015])).apply(pose)
    cfg = TrackingConfig(iterations=25, rays_per_iteration=256, seed=1)

    shift = np.array([0.4, -0.3, 0.25])
    g = Pose.from_rotvec([0.0, 0.0, np.pi / 2], shift)
    moved = _quarter_turn(base, shift)
    assert np.allclose(
        _exact_frame(moved, ds.intrinsics, g.compose(pose)).depth, frame.depth, rtol=0, atol=1e-9
    )

    a = track_frame(base, frame, init, cfg, ds.intrinsics)
    b = track_frame(moved, frame, g.compose(init), cfg, ds.intrinsics)
    expected = g.compose(a.pose)
    assert b.pose.distance_to(expected) < 1e-6
    assert b.pose.angle_to(expected) < 1e-6
    assert np.allclose(b.losses, a.losses, rtol=1e-6, atol=1e-15)


def test_converged_frame_loss_does_not_rise():
    ds, grid = smooth_scene()
    pose = ds.frames[2].gt_pose
    frame = _exact_frame(grid, ds.intrinsics, pose)
    cfg = TrackingConfig(iterations=30, rays_per_iteration=128, convergence_threshold=0.0)
    res = track_frame(grid, frame, pose, cfg, ds.intrinsics)
    assert res.iterations == 30
    tail = np.asarray(res.losses[-10:])
    assert tail.max() < 1e-18
    assert np.all(np.diff(tail) <= 1e-18)
    assert res.pose.distance_to(pose) < 1e-10


@pytest.mark.slow
def test_depth_alone_aligns_a_textureless_map():
    ds, grid = smooth_scene(cells=16, intrinsics=small_intrinsics(48, 36))
    flat = grid.copy()
    flat.params[:, SH_SLICE] = 0.0
    pose = ds.frames[1].gt_pose
    frame = _exact_frame(flat, ds.intrinsics, pose)

    init = PosePerturbation(np.deg2rad([0.5, -0.3, 0.2]), np.array([0.01, -0.005, 0.008])).apply(pose)
    cfg = TrackingConfig(iterations=200, rays_per_iteration=1024, lambda_c=0.0)
    res = track_frame(flat, frame, init, cfg, ds.intrinsics)
    assert not res.failed
    assert res.final_loss < res.first_loss
    assert res.pose.distance_to(pose) < 0.5 * init.distance_to(pose)
    assert res.pose.angle_to(pose) < 0.5 * init.angle_to(pose)
