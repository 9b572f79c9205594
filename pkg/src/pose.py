# src/pose.py
"""
Rigid camera-to-world poses.

Convention:
- rotation is a unit quaternion (qx, qy, qz, qw), scalar last, as in TUM trajectory files
- camera frame is OpenCV style: x right, y down, z forward
- a PosePerturbation rotates about the camera center: R <- exp([w]x) R, t <- t + tau
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

_RENORM_TOL = 1e-12


def _as_vec(x: Sequence[float] | np.ndarray, n: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape != (n,):
        raise ValueError(f"{name} must have {n} components, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite")
    return v


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        q = _as_vec(self.rotation, 4, "rotation")
        n = float(np.linalg.norm(q))
        if n < 1e-12:
            raise ValueError("rotation quaternion has zero norm")
        # re-normalize only when needed so that values read back from disk stay bit-identical
        if abs(n - 1.0) > _RENORM_TOL:
            q = q / n
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", _as_vec(self.translation, 3, "translation"))

    # -----------------------------
    # Constructors
    # -----------------------------
    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: Sequence[float] | np.ndarray) -> "Pose":
        return cls(Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat(), t)

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], t: Sequence[float] | np.ndarray) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_quat(), t)

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        up: Sequence[float] = (0.0, 0.0, 1.0),
    ) -> "Pose":
        eye_v = _as_vec(eye, 3, "eye")
        fwd = _as_vec(target, 3, "target") - eye_v
        fn = np.linalg.norm(fwd)
        if fn < 1e-12:
            raise ValueError("look_at target coincides with eye")
        z = fwd / fn
        x = np.cross(z, _as_vec(up, 3, "up"))
        xn = np.linalg.norm(x)
        if xn < 1e-9:
            raise ValueError("look_at direction is parallel to the up vector")
        x = x / xn
        y = np.cross(z, x)
        return cls.from_matrix(np.stack([x, y, z], axis=1), eye_v)

    # -----------------------------
    # Views
    # -----------------------------
    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    # -----------------------------
    # Group operations
    # -----------------------------
    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other (apply other first)."""
        r = Rotation.from_quat(self.rotation) * Rotation.from_quat(other.rotation)
        return Pose(r.as_quat(), self.R @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        r_inv = Rotation.from_quat(self.rotation).inv()
        return Pose(r_inv.as_quat(), -(r_inv.as_matrix() @ self.translation))

    def transform_points(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.R.T + self.translation

    def angle_to(self, other: "Pose") -> float:
        """Rotation angle (radians) between two orientations."""
        rel = Rotation.from_quat(self.rotation).inv() * Rotation.from_quat(other.rotation)
        return float(np.linalg.norm(rel.as_rotvec()))

    def distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6f}" for v in self.rotation)
        t = ", ".join(f"{v:.6f}" for v in self.translation)
        return f"Pose(q=[{q}], t=[{t}])"


@dataclass(frozen=True)
class PosePerturbation:
    """Local 6-vector update: omega (axis-angle, rad) about the camera center, tau (m)."""

    omega: np.ndarray
    tau: np.ndarray

    def __post_init__(self) -> None:
        w = _as_vec(self.omega, 3, "omega")
        if np.linalg.norm(w) >= np.pi:
            raise ValueError("|omega| must be < pi for an unambiguous exp/log round-trip")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "tau", _as_vec(self.tau, 3, "tau"))

    @classmethod
    def from_vector(cls, xi: Sequence[float]) -> "PosePerturbation":
        v = _as_vec(xi, 6, "perturbation")
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.tau])

    def apply(self, pose: Pose) -> Pose:
        r = Rotation.from_rotvec(self.omega) * Rotation.from_quat(pose.rotation)
        q = r.as_quat()
        return Pose(q / np.linalg.norm(q), pose.translation + self.tau)


def relative_perturbation(a: Pose, b: Pose) -> PosePerturbation:
    """The perturbation that maps a onto b (log of the left rotation difference)."""
    r = Rotation.from_quat(b.rotation) * Rotation.from_quat(a.rotation).inv()
    return PosePerturbation(r.as_rotvec(), b.translation - a.translation)


# -----------------------------
# Trajectories (TUM text format)
# -----------------------------
class TrajectoryFormatError(ValueError):
    pass


@dataclass(eq=False)
class Trajectory:
    """Timestamped camera-to-world poses; one TUM line per entry."""

    timestamps: List[float] = field(default_factory=list)
    poses: List[Pose] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.timestamps = [float(t) for t in self.timestamps]
        self.poses = list(self.poses)
        if len(self.timestamps) != len(self.poses):
            raise TrajectoryFormatError(
                f"{len(self.timestamps)} timestamps for {len(self.poses)} poses"
            )
        if np.any(np.diff(np.asarray(self.timestamps)) <= 0):
            raise TrajectoryFormatError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def append(self, timestamp: float, pose: Pose) -> None:
        if self.timestamps and float(timestamp) <= self.timestamps[-1]:
            raise TrajectoryFormatError(f"timestamp {timestamp} does not follow {self.timestamps[-1]}")
        self.timestamps.append(float(timestamp))
        self.poses.append(pose)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])

    def to_tum_lines(self) -> List[str]:
        lines = []
        for ts, p in zip(self.timestamps, self.poses):
            vals = [ts, *p.translation, *p.rotation]
            lines.append(" ".join(f"{v:.17g}" for v in vals))
        return lines

    def save_tum(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("# timestamp tx ty tz qx qy qz qw\n" + "\n".join(self.to_tum_lines()) + "\n", encoding="utf-8")
        return p

    @classmethod
    def from_tum_lines(cls, lines: Iterable[str], source: str = "<lines>") -> "Trajectory":
        traj = cls()
        for n, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise TrajectoryFormatError(f"{source}:{n}: expected 8 values, got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError as e:
                raise TrajectoryFormatError(f"{source}:{n}: {e}") from e
            try:
                pose = Pose(np.array(vals[4:8]), np.array(vals[1:4]))
            except ValueError as e:
                raise TrajectoryFormatError(f"{source}:{n}: {e}") from e
            traj.append(vals[0], pose)
        return traj

    @classmethod
    def load_tum(cls, path: str | Path) -> "Trajectory":
        p = Path(path)
        if not p.exists():
            raise TrajectoryFormatError(f"trajectory file not found: {p}")
        return cls.from_tum_lines(p.read_text(encoding="utf-8").splitlines(), source=str(p))
