import numpy as np
import pytest

from src.pose import Pose, PosePerturbation, Trajectory, TrajectoryFormatError, relative_perturbation

from tests.helpers import circle_poses


def test_compose_with_inverse_is_identity():
    p = Pose.from_rotvec([0.3, -0.2, 0.9], [1.0, 2.0, 3.0])
    e = p.compose(p.inverse())
    assert e.angle_to(Pose.identity()) < 1e-12
    assert np.allclose(e.translation, 0.0)
    pts = np.random.default_rng(0).normal(size=(5, 3))
    assert np.allclose(p.inverse().transform_points(p.transform_points(pts)), pts)


def test_quaternion_normalization():
    assert np.array_equal(Pose(np.array([0.0, 0.0, 0.0, 2.0])).rotation, [0.0, 0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        Pose(np.zeros(4))
    with pytest.raises(ValueError):
        Pose(np.array([0.0, 0.0, np.nan, 1.0]))


def test_perturbation_round_trip():
    a = Pose.from_rotvec([0.1, 0.2, 0.3], [0.0, 1.0, 0.0])
    xi = PosePerturbation(np.array([0.01, -0.02, 0.005]), np.array([0.1, 0.0, -0.05]))
    b = xi.apply(a)
    back = relative_perturbation(a, b)
    assert np.allclose(back.as_vector(), xi.as_vector())
    assert np.allclose(b.translation, a.translation + xi.tau)
    with pytest.raises(ValueError):
        PosePerturbation(np.array([4.0, 0.0, 0.0]), np.zeros(3))


def test_tum_round_trip_is_exact(tmp_path):
    poses = circle_poses(7)
    traj = Trajectory([1305031102.175304 + 0.033 * i for i in range(7)], poses)
    back = Trajectory.load_tum(traj.save_tum(tmp_path / "t.txt"))
    assert back.timestamps == traj.timestamps
    for a, b in zip(traj.poses, back.poses):
        assert np.array_equal(a.translation, b.translation)
        assert np.array_equal(a.rotation, b.rotation)


def test_tum_parsing_errors():
    with pytest.raises(TrajectoryFormatError):
        Trajectory.from_tum_lines(["0 0 0 0 0 0 0 1", "0 0 0 0 0 0 0 1"])
    with pytest.raises(TrajectoryFormatError):
        Trajectory.from_tum_lines(["0 0 0 0 0 0 1"])
    with pytest.raises(TrajectoryFormatError):
        Trajectory.from_tum_lines(["0 0 0 0 0 0 0 x"])
    traj = Trajectory.from_tum_lines(["# comment", "", "1.0 1 2 3 0 0 0 1"])
    assert len(traj) == 1
    assert np.array_equal(traj.positions, [[1.0, 2.0, 3.0]])
