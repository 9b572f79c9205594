# src/camera.py
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.pose import Pose


class CameraIntrinsics(BaseModel):
    """Pinhole model. Pixel (u, v) addresses image column u and row v at integer coordinates."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float
    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    depth_scale: float = Field(1000.0, gt=0)

    @model_validator(mode="after")
    def _principal_point_inside(self) -> "CameraIntrinsics":
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) must lie inside the {self.width}x{self.height} image"
            )
        return self

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float, depth_scale: float = 1000.0) -> "CameraIntrinsics":
        fx = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2.0)
        return cls(
            fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            width=width, height=height, depth_scale=depth_scale,
        )

    def camera_dirs(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unnormalized camera-frame directions ((u-cx)/fx, (v-cy)/fy, 1) -> [M, 3]."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def z_factor(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """z component of the unit camera-frame ray; z-depth = ray distance * z_factor."""
        return 1.0 / np.linalg.norm(self.camera_dirs(u, v), axis=-1)

    def pixel_grid(self, stride: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        """Row-major integer pixel coordinates (u, v) of a strided image, flattened."""
        vv, uu = np.meshgrid(
            np.arange(0, self.height, stride, dtype=np.float64),
            np.arange(0, self.width, stride, dtype=np.float64),
            indexing="ij",
        )
        return uu.reshape(-1), vv.reshape(-1)


@dataclass(eq=False)
class Frame:
    """One RGB-D observation. depth is z-depth in meters, 0 = invalid."""

    color: np.ndarray
    depth: np.ndarray
    timestamp: float = 0.0
    gt_pose: Optional[Pose] = None

    def __post_init__(self) -> None:
        self.color = np.asarray(self.color, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.color.ndim != 3 or self.color.shape[2] != 3:
            raise ValueError(f"color must be HxWx3, got {self.color.shape}")
        if self.depth.shape != self.color.shape[:2]:
            raise ValueError(f"depth shape {self.depth.shape} does not match color {self.color.shape[:2]}")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite and >= 0")

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @property
    def valid_depth(self) -> np.ndarray:
        return self.depth > 0

    def matches(self, intrinsics: CameraIntrinsics) -> bool:
        return self.width == intrinsics.width and self.height == intrinsics.height
