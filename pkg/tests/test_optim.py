import numpy as np
import pytest

from src.optim import AdamState, RmspropState
from src.voxel_grid import NUM_CHANNELS


def test_rmsprop_zero_gradient_is_a_no_op():
    params = np.ones((4, NUM_CHANNELS))
    state = RmspropState(4, lr_sigma=1.0, lr_sh=0.1, dtype=np.float64)
    state.step(params, np.array([0, 2]), np.zeros((2, NUM_CHANNELS)))
    assert np.array_equal(params, np.ones((4, NUM_CHANNELS)))


def test_rmsprop_only_touches_given_rows():
    params = np.zeros((5, NUM_CHANNELS))
    state = RmspropState(5, lr_sigma=1.0, lr_sh=0.1, dtype=np.float64)
    state.step(params, np.array([1, 3]), np.ones((2, NUM_CHANNELS)))
    assert not params[[0, 2, 4]].any()
    assert not state.sq_avg[[0, 2, 4]].any()
    assert np.all(params[[1, 3]] < 0)


def test_rmsprop_first_step_size():
    params = np.zeros((1, NUM_CHANNELS))
    state = RmspropState(1, lr_sigma=2.0, lr_sh=0.5, decay=0.95, eps=0.0, dtype=np.float64)
    state.step(params, np.array([0]), np.full((1, NUM_CHANNELS), 3.0))
    scale = 1.0 / np.sqrt(0.05)
    assert params[0, 0] == pytest.approx(-2.0 * scale)
    assert np.allclose(params[0, 1:], -0.5 * scale)


def test_adam_first_step_is_lr_sized():
    adam = AdamState(lr=np.full(6, 1e-3))
    update = adam.step(np.array([5.0, -0.1, 1e3, 2.0, -7.0, 0.5]))
    assert np.allclose(np.abs(update), 1e-3, rtol=1e-4)
    assert np.sign(update[1]) == -1.0


def test_adam_zero_gradient_gives_zero_update():
    adam = AdamState(lr=np.full(6, 1e-3))
    assert not adam.step(np.zeros(6)).any()
