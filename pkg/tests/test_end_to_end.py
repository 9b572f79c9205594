"""Reduced-size acceptance runs: small grids and images, the same pass thresholds."""

import math

import numpy as np
import pytest

from src.config import MappingConfig, TrackingConfig
from src.dataset import (
    Box,
    CameraSpec,
    Checker,
    GridSceneSpec,
    SceneSpec,
    Sphere,
    TrajectorySpec,
    synth_from_grid_spec,
    synth_from_primitives,
)
from src.eval import evaluate_map, evaluate_trajectory, speed_accuracy_sweep
from src.mapping import map_scene
from src.pose import PosePerturbation
from src.tracking import track_frame, track_sequence

pytestmark = pytest.mark.slow

SEED = 0
KEYFRAME_STRIDE = 2
RPE_INTERVAL_M = 0.05

GRID_SCENE = GridSceneSpec(
    cells=16,
    clear_radius=0.35,
    camera=CameraSpec(width=48, height=36),
    trajectory=TrajectorySpec(kind="circle", num_frames=12, center=[0.0, 0.0, 0.0], radius=0.3, arc_deg=30.0),
    seed=SEED,
)

# textureless walls, one textured sphere, one flat box
ROOM = SceneSpec(
    room_lo=[-2.0, -2.0, 0.0],
    room_hi=[2.0, 2.0, 3.0],
    wall_albedo=[[0.7, 0.7, 0.7]],
    spheres=[Sphere(center=[1.1, 0.3, 1.2], radius=0.35, albedo=[0.8, 0.3, 0.2], texture=Checker(period=0.3))],
    boxes=[Box(lo=[-1.4, -1.4, 0.0], hi=[-0.9, -0.9, 0.6], albedo=[0.3, 0.5, 0.7])],
    trajectory=TrajectorySpec(kind="circle", num_frames=12, center=[0.0, 0.0, 1.4], radius=0.4, look_outward=True),
    camera=CameraSpec(width=32, height=24),
    seed=SEED,
)


def _map_config(**kw):
    base = dict(
        iterations_per_stage=800,
        upsample_schedule=[16],
        keyframe_stride=KEYFRAME_STRIDE,
        rays_per_batch=2048,
        seed=SEED,
    )
    base.update(kw)
    return MappingConfig(**base)


def _perturb(pose, rng, max_deg=2.0, max_m=0.05):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    omega = axis * np.deg2rad(rng.uniform(0.0, max_deg))
    return PosePerturbation(omega, direction * rng.uniform(0.0, max_m)).apply(pose)


@pytest.fixture(scope="module")
def scene():
    return synth_from_grid_spec(GRID_SCENE)


@pytest.fixture(scope="module")
def tracking_config():
    return TrackingConfig(iterations=150, rays_per_iteration=1024, seed=SEED)


def test_mapping_recovers_generating_grid(scene):
    ds, truth = scene
    mapped = map_scene(ds, _map_config(), geometry=truth.geometry).grid
    report = evaluate_map(mapped, ds, indices=ds.heldout_indices(KEYFRAME_STRIDE), seed=SEED)
    assert report.psnr >= 30.0
    assert report.depth_l1 <= truth.geometry.voxel_size


def test_perturbed_frames_are_recovered(scene):
    ds, truth = scene
    voxel = truth.geometry.voxel_size
    rng = np.random.default_rng(SEED)
    cfg = TrackingConfig(iterations=300, rays_per_iteration=1024, seed=SEED)
    recovered = 0
    for frame in ds.frames:
        init = _perturb(frame.gt_pose, rng)
        res = track_frame(truth, frame, init, cfg, ds.intrinsics, rng=rng)
        rot = np.rad2deg(res.pose.angle_to(frame.gt_pose))
        trans = res.pose.distance_to(frame.gt_pose)
        recovered += int(not res.failed and rot <= 0.2 and trans <= voxel / 2)
    assert recovered >= math.ceil(0.95 * len(ds))


def test_sequence_tracking_accuracy(scene, tracking_config):
    ds, truth = scene
    voxel = truth.geometry.voxel_size
    seq = track_sequence(truth, ds.frames, ds.intrinsics, tracking_config)
    assert seq.num_failed == 0
    report = evaluate_trajectory(seq.trajectory, ds.trajectory(), interval=RPE_INTERVAL_M)
    assert report.ate_rmse <= voxel
    assert report.rpe_r is not None and report.rpe_r <= 0.3
    assert report.rpe_t <= voxel / 2


def test_more_rays_track_better(scene, tracking_config):
    ds, truth = scene
    sweep = speed_accuracy_sweep(truth, ds, [2, 8, 64, 512], [tracking_config.iterations], tracking_config,
                                 rpe_interval=RPE_INTERVAL_M)
    ates = [r["ate_m"] for r in sweep.rows]
    assert np.all(np.isfinite(ates))
    assert sweep.spearman <= 0.0
    assert ates[-1] <= 0.5 * ates[0]


def test_depth_supervision_fixes_textureless_geometry():
    ds = synth_from_primitives(ROOM).dataset
    heldout = ds.heldout_indices(KEYFRAME_STRIDE)
    reports = {}
    for lambda_d in (0.0, 1.0):
        cfg = _map_config(lambda_d=lambda_d, iterations_per_stage=300, upsample_schedule=[16, 32])
        grid = map_scene(ds, cfg).grid
        reports[lambda_d] = evaluate_map(grid, ds, indices=heldout, seed=SEED)
    rgb, rgbd = reports[0.0], reports[1.0]
    assert rgb.depth_l1 >= 10.0 * rgbd.depth_l1
    assert abs(rgb.psnr - rgbd.psnr) <= 3.0


def test_reruns_are_byte_identical(scene):
    ds, truth = scene
    cfg = _map_config(iterations_per_stage=30, upsample_schedule=[8, 16], rays_per_batch=256)
    a = map_scene(ds, cfg).grid
    b = map_scene(ds, cfg).grid
    assert a.checksum() == b.checksum()
    assert a.to_bytes() == b.to_bytes()

    tcfg = TrackingConfig(iterations=20, rays_per_iteration=256, seed=SEED)
    first = track_sequence(truth, ds.frames, ds.intrinsics, tcfg).trajectory.to_tum_lines()
    again = track_sequence(truth, ds.frames, ds.intrinsics, tcfg).trajectory.to_tum_lines()
    assert first == again
