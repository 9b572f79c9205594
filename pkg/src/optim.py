# src/optim.py
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from src.voxel_grid import NUM_CHANNELS, SIGMA


class RmspropState:
    """
    Per-vertex RMSProp for the grid payload. Only the rows passed to step() are touched,
    so untouched vertices keep both their value and their running average.
    """

    def __init__(
        self,
        num_vertices: int,
        *,
        lr_sigma: float,
        lr_sh: float,
        decay: float = 0.95,
        eps: float = 1e-8,
        dtype: np.dtype | str = np.float32,
    ) -> None:
        self.decay = float(decay)
        self.eps = float(eps)
        self.lr = np.full(NUM_CHANNELS, lr_sh, dtype=np.float64)
        self.lr[SIGMA] = lr_sigma
        self.sq_avg = np.zeros((num_vertices, NUM_CHANNELS), dtype=np.dtype(dtype))
        self.steps = 0

    def step(self, params: np.ndarray, idx: np.ndarray, grad: np.ndarray) -> None:
        """params[idx] -= lr * g / sqrt(v + eps), v the running mean of g^2."""
        if idx.size == 0:
            self.steps += 1
            return
        g = np.asarray(grad, dtype=np.float64)
        v = self.decay * self.sq_avg[idx].astype(np.float64) + (1.0 - self.decay) * g * g
        self.sq_avg[idx] = v
        update = self.lr * g / np.sqrt(v + self.eps)
        params[idx] = (params[idx].astype(np.float64) - update).astype(params.dtype)
        self.steps += 1


@dataclass
class AdamState:
    """Adam on a small dense vector (the 6-dof pose chart). lr may be per component."""

    lr: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    t: int = 0

    def __post_init__(self) -> None:
        self.lr = np.asarray(self.lr, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.lr)
        if self.v is None:
            self.v = np.zeros_like(self.lr)

    def step(self, grad: np.ndarray) -> np.ndarray:
        """Returns the update to subtract from the parameters."""
        g = np.asarray(grad, dtype=np.float64)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
