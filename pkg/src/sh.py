"""
Real spherical harmonics up to degree 2 (9 basis functions) and the SH -> color transfer.

Basis order: [Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22], i.e. (1, y, z, x, xy, yz, 3z^2-1, xz, x^2-y^2)
scaled by the standard normalization constants.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2_XY = 1.0925484305920792
SH_C2_ZZ = 0.31539156525252005
SH_C2_XX_YY = 0.5462742152960396

SH_DEGREE = 2
SH_BASIS_DIM = (SH_DEGREE + 1) ** 2
COLOR_OFFSET = 0.5

UNIT_TOL = 1e-9


class NonUnitDirectionError(ValueError):
    pass


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Basis values for [..., 3] directions -> [..., 9]. No unit-length check."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack(
        [
            np.full_like(x, SH_C0),
            SH_C1 * y,
            SH_C1 * z,
            SH_C1 * x,
            SH_C2_XY * x * y,
            SH_C2_XY * y * z,
            SH_C2_ZZ * (3.0 * z * z - 1.0),
            SH_C2_XY * x * z,
            SH_C2_XX_YY * (x * x - y * y),
        ],
        axis=-1,
    )


def sh_basis_jacobian(dirs: np.ndarray) -> np.ndarray:
    """d basis / d (x, y, z) for [..., 3] directions -> [..., 9, 3]."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    J = np.zeros(d.shape[:-1] + (SH_BASIS_DIM, 3))
    J[..., 1, 1] = SH_C1
    J[..., 2, 2] = SH_C1
    J[..., 3, 0] = SH_C1
    J[..., 4, 0] = SH_C2_XY * y
    J[..., 4, 1] = SH_C2_XY * x
    J[..., 5, 1] = SH_C2_XY * z
    J[..., 5, 2] = SH_C2_XY * y
    J[..., 6, 2] = 6.0 * SH_C2_ZZ * z
    J[..., 7, 0] = SH_C2_XY * z
    J[..., 7, 2] = SH_C2_XY * x
    J[..., 8, 0] = 2.0 * SH_C2_XX_YY * x
    J[..., 8, 1] = -2.0 * SH_C2_XX_YY * y
    return J


def check_unit(dirs: np.ndarray, tol: float = UNIT_TOL) -> None:
    n = np.linalg.norm(np.asarray(dirs, dtype=np.float64), axis=-1)
    if not np.all(np.abs(n - 1.0) <= tol):
        worst = float(np.max(np.abs(n - 1.0)))
        raise NonUnitDirectionError(f"direction is not unit length (| |d| - 1 | = {worst:.3e})")


def sh_eval(direction: np.ndarray) -> np.ndarray:
    check_unit(direction)
    return sh_basis(direction)


def sh_raw_color(sh: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Pre-activation color: sh [..., 3, 9] . basis [..., 9] + 0.5 -> [..., 3]."""
    return np.einsum("...cm,...m->...c", sh, basis) + COLOR_OFFSET


def color_activation(raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Clamp to [0, 1]. live marks channels strictly inside (0, 1); clamped channels carry zero gradient."""
    live = (raw > 0.0) & (raw < 1.0)
    return np.clip(raw, 0.0, 1.0), live


def sh_color_from_basis(sh: np.ndarray, basis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """sh: [..., 3, 9], basis: [..., 9] -> (rgb [..., 3], live [..., 3])."""
    return color_activation(sh_raw_color(sh, basis))


def sh_color(sh: np.ndarray, direction: np.ndarray) -> np.ndarray:
    rgb, _ = sh_color_from_basis(np.asarray(sh, dtype=np.float64), sh_eval(direction))
    return rgb
