import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation
from scipy.stats import spearmanr

from src.config import TrackingConfig
from src.eval import (
    PSNR_CAP_DB,
    MetricError,
    MetricReport,
    associate,
    ate_rmse,
    depth_l1,
    evaluate_map,
    evaluate_trajectory,
    psnr,
    rpe,
    save_report,
    speed_accuracy_sweep,
)
from src.pose import Pose, Trajectory

from tests.helpers import circle_poses, smooth_scene


def _traj(poses, dt=0.1, t0=0.0):
    return Trajectory([t0 + i * dt for i in range(len(poses))], poses)


def _line(n=31, step=0.1):
    return _traj([Pose(np.array([0.0, 0.0, 0.0, 1.0]), [step * k, 0.0, 0.0]) for k in range(n)])


def test_psnr_values():
    img = np.full((4, 4, 3), 0.5)
    assert psnr(img, img) == PSNR_CAP_DB
    assert psnr(img + 0.1, img) == pytest.approx(20.0)
    with pytest.raises(MetricError):
        psnr(img, img[:2])
    with pytest.raises(MetricError):
        psnr(img, img, np.zeros((4, 4), dtype=bool))


def test_psnr_falls_as_noise_grows():
    rng = np.random.default_rng(3)
    ref = rng.uniform(0.2, 0.8, (24, 32, 3))
    noise = rng.normal(size=ref.shape)
    values = [psnr(ref + s * noise, ref) for s in (0.005, 0.02, 0.05)]
    assert values[0] > values[1] > values[2]
    assert values[0] - values[1] == pytest.approx(20 * np.log10(4.0))


def _random_path(rng, n=20):
    poses = [Pose.from_rotvec(rng.normal(scale=1.0, size=3), rng.normal(size=3))]
    for _ in range(n - 1):
        step = Pose.from_rotvec(rng.normal(scale=0.1, size=3), rng.normal(scale=0.2, size=3))
        poses.append(poses[-1].compose(step))
    return poses


@pytest.mark.parametrize("seed", range(5))
def test_ate_unchanged_by_random_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    ref_poses = _random_path(rng)
    est_poses = [Pose(p.rotation, p.translation + rng.normal(scale=0.02, size=3)) for p in ref_poses]
    g = Pose.from_rotvec(rng.normal(size=3), rng.normal(scale=5.0, size=3))
    ref, est = _traj(ref_poses), _traj(est_poses)

    assert ate_rmse(_traj([g.compose(p) for p in ref_poses]), ref) == pytest.approx(0.0, abs=1e-9)
    base = ate_rmse(est, ref)
    assert base > 0.0
    assert ate_rmse(_traj([g.compose(p) for p in est_poses]), ref) == pytest.approx(base, abs=1e-9)
    assert ate_rmse(est, _traj([g.compose(p) for p in ref_poses])) == pytest.approx(base, abs=1e-9)


def test_depth_l1_values():
    assert depth_l1(np.array([1.009, 1.991, 5.0]), np.array([1.0, 2.0, 0.0])) == pytest.approx(0.009)
    assert depth_l1(np.array([1.0, 2.02]), np.array([1.0, 2.0]), np.array([False, True])) == pytest.approx(0.02)
    with pytest.raises(MetricError):
        depth_l1(np.ones(2), np.zeros(2))


def test_association_window():
    ref = _traj(circle_poses(5))
    assert associate(_traj(circle_poses(5), t0=0.01), ref) == [(i, i) for i in range(5)]
    assert associate(_traj(circle_poses(5), t0=0.05), ref) == []
    with pytest.raises(MetricError):
        ate_rmse(_traj(circle_poses(5), t0=0.05), ref)


def test_ate_identity_and_shift():
    ref = _traj(circle_poses(12))
    assert ate_rmse(ref, ref) == pytest.approx(0.0, abs=1e-12)
    shifted = _traj([Pose(p.rotation, p.translation + [1.0, 0.0, 0.0]) for p in ref.poses])
    assert ate_rmse(shifted, ref) == pytest.approx(0.0, abs=1e-9)
    assert ate_rmse(shifted, ref, align=False) == pytest.approx(1.0)


def test_ate_removes_rigid_motion():
    ref = _traj(circle_poses(12))
    g = Pose.from_rotvec([0.1, -0.3, 0.7], [0.5, 2.0, -1.0])
    moved = _traj([g.compose(p) for p in ref.poses])
    assert ate_rmse(moved, ref) == pytest.approx(0.0, abs=1e-9)
    assert rpe(moved, ref, interval=0.3) == pytest.approx((0.0, 0.0), abs=1e-6)


def test_rpe_scale_error():
    ref = _line()
    scaled = _traj([Pose(p.rotation, 1.01 * p.translation) for p in ref.poses])
    t, r = rpe(scaled, ref, interval=1.0)
    assert t == pytest.approx(0.01, rel=1e-6)
    assert r == pytest.approx(0.0, abs=1e-9)


def test_rpe_needs_long_enough_path():
    ref = _line(n=5)
    with pytest.raises(MetricError):
        rpe(ref, ref, interval=1.0)
    report = evaluate_trajectory(ref, ref, interval=1.0)
    assert report.rpe_t is None
    assert report.ate_rmse == pytest.approx(0.0, abs=1e-12)


def test_too_few_poses():
    one = _traj(circle_poses(1))
    with pytest.raises(MetricError):
        ate_rmse(one, one)


def test_report_table_and_json(tmp_path):
    report = MetricReport(psnr=31.5).merged(MetricReport(ate_rmse=0.012, n_poses=40))
    table = report.to_table()
    assert "31.500000" in table
    assert "n/a" in table
    path = save_report(report, tmp_path / "report.json")
    data = json.loads(path.read_text())
    assert data["ate_rmse"] == 0.012
    assert data["depth_l1"] is None
    assert (tmp_path / "report.txt").exists()


def test_map_metrics_on_generating_grid():
    ds, grid = smooth_scene()
    report = evaluate_map(grid, ds, n_images=2, n_pixels=500)
    assert report.n_images == 2
    assert report.n_pixels == 1000
    assert report.psnr > 40.0
    assert report.depth_l1 < 1e-3


def test_sweep_rows_and_rank_correlation(tmp_path):
    ds, grid = smooth_scene()
    cfg = TrackingConfig(seed=0)
    one = speed_accuracy_sweep(grid, ds, [32], [2], cfg, rpe_interval=0.1)
    assert len(one.rows) == 1
    assert np.isnan(one.spearman)

    two = speed_accuracy_sweep(grid, ds, [16, 64], [1, 2], cfg, rpe_interval=0.1)
    assert [(r["rays"], r["iters"]) for r in two.rows] == [(16, 1), (16, 2), (64, 1), (64, 2)]
    ate = [r["ate_m"] for r in two.rows]
    np.testing.assert_allclose(two.spearman, spearmanr([r["rays"] for r in two.rows], ate).statistic)
    np.testing.assert_allclose(two.spearman_budget, spearmanr([r["rays"] * r["iters"] for r in two.rows], ate).statistic)

    single = speed_accuracy_sweep(grid, ds, [16, 32, 64], [2], cfg, rpe_interval=0.1)
    np.testing.assert_allclose(single.spearman, single.spearman_budget)
    path = two.save_csv(tmp_path / "sweep.csv", header_comment="spearman %.3f" % two.spearman)
    assert path.read_text().splitlines()[1].startswith("rays,iters,ate_m")


def test_rotation_angle_of_relative_pose():
    a = Pose.identity()
    b = Pose(Rotation.from_euler("z", 30, degrees=True).as_quat(), [0.0, 0.0, 0.0])
    assert np.rad2deg(a.angle_to(b)) == pytest.approx(30.0)
