# src/voxel_grid.py
"""
Voxel radiance field storage.

Each lattice vertex holds 28 values: one raw density followed by 3x9 spherical-harmonic
coefficients (channel-major: r0..r8, g0..g8, b0..b8). Vertices are stored flat in
x-fastest order, idx = x + nx * (y + ny * z). Cells carry an occupancy bit; inactive cells
produce no samples during ray marching.

Design:
- dense vertex storage, sparse behaviour through the occupancy mask
- raw density is clamped to >= 0 on read
- gradients are accumulated sparsely (touched vertices only)
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.sh import SH_BASIS_DIM

log = logging.getLogger(__name__)

NUM_CHANNELS = 1 + 3 * SH_BASIS_DIM  # 28
SIGMA = 0
SH_SLICE = slice(1, NUM_CHANNELS)

GRID_MAGIC = b"VXGF"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sI3I3dd")

# corner k = a + 2b + 4c for offsets (a, b, c) along (x, y, z)
CORNER_OFFSETS = np.array([[k & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)], dtype=np.int64)

BOUNDS_TOL = 1e-9


class OutsideGridError(ValueError):
    pass


class GridFormatError(ValueError):
    pass


class ResolutionError(ValueError):
    pass


# -----------------------------
# Geometry
# -----------------------------
@dataclass(frozen=True)
class GridGeometry:
    """resolution counts vertices per axis; the world bounds span (resolution - 1) * voxel_size."""

    resolution: Tuple[int, int, int]
    origin: Tuple[float, float, float]
    voxel_size: float

    def __post_init__(self) -> None:
        res = tuple(int(n) for n in self.resolution)
        if len(res) != 3 or min(res) < 2:
            raise ResolutionError(f"resolution must be 3 integers >= 2, got {self.resolution}")
        if not self.voxel_size > 0:
            raise ResolutionError(f"voxel_size must be > 0, got {self.voxel_size}")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @classmethod
    def cube(cls, n: int, voxel_size: float, origin: Sequence[float] = (0.0, 0.0, 0.0)) -> "GridGeometry":
        return cls((n, n, n), tuple(origin), voxel_size)

    @classmethod
    def from_bounds(
        cls,
        lo: Sequence[float],
        hi: Sequence[float],
        cells: int,
        margin: float = 0.05,
    ) -> "GridGeometry":
        """Uniform grid around [lo, hi] grown by margin * extent on each side; `cells` spans the longest axis."""
        lo_v = np.asarray(lo, dtype=np.float64)
        hi_v = np.asarray(hi, dtype=np.float64)
        extent = np.maximum(hi_v - lo_v, 1e-6)
        lo_v = lo_v - margin * extent
        extent = extent * (1.0 + 2.0 * margin)
        voxel = float(extent.max()) / cells
        res = tuple(int(np.ceil(e / voxel - 1e-9)) + 1 for e in extent)
        res = tuple(max(2, n) for n in res)
        return cls(res, tuple(lo_v), voxel)

    @property
    def origin_array(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def cells(self) -> Tuple[int, int, int]:
        return tuple(n - 1 for n in self.resolution)

    @property
    def num_vertices(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def num_cells(self) -> int:
        cx, cy, cz = self.cells
        return cx * cy * cz

    @property
    def upper(self) -> np.ndarray:
        return self.origin_array + (np.asarray(self.resolution) - 1) * self.voxel_size

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.origin_array))

    def world_to_grid(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.origin_array) / self.voxel_size

    def grid_to_world(self, g: np.ndarray) -> np.ndarray:
        return self.origin_array + np.asarray(g, dtype=np.float64) * self.voxel_size

    def contains(self, p: np.ndarray) -> np.ndarray:
        g = self.world_to_grid(p)
        hi = np.asarray(self.resolution) - 1
        return np.all((g >= -BOUNDS_TOL) & (g <= hi + BOUNDS_TOL), axis=-1)

    def vertex_index(self, ijk: np.ndarray) -> np.ndarray:
        nx, ny, _ = self.resolution
        ijk = np.asarray(ijk, dtype=np.int64)
        return ijk[..., 0] + nx * (ijk[..., 1] + ny * ijk[..., 2])

    def cell_index(self, cell: np.ndarray) -> np.ndarray:
        cx, cy, _ = self.cells
        cell = np.asarray(cell, dtype=np.int64)
        return cell[..., 0] + cx * (cell[..., 1] + cy * cell[..., 2])

    def locate(self, p: np.ndarray, *, clamp: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """
        World points [..., 3] -> (cell [..., 3] int, frac [..., 3] in [0, 1]).

        A point on a shared face belongs to the cell whose lower corner is floor(g),
        except on the upper grid boundary where it belongs to the last cell.
        """
        g = self.world_to_grid(p)
        hi = np.asarray(self.resolution, dtype=np.float64) - 1.0
        if not clamp:
            outside = np.any((g < -BOUNDS_TOL) | (g > hi + BOUNDS_TOL), axis=-1)
            if np.any(outside):
                raise OutsideGridError(f"{int(np.count_nonzero(outside))} point(s) outside grid")
        g = np.clip(g, 0.0, hi)
        cell = np.minimum(np.floor(g).astype(np.int64), np.asarray(self.resolution) - 2)
        return cell, g - cell

    def corners(self, cell: np.ndarray) -> np.ndarray:
        """cell [..., 3] -> the 8 corner vertex indices [..., 8]."""
        return self.vertex_index(cell[..., None, :] + CORNER_OFFSETS)

    def upsampled(self) -> "GridGeometry":
        return GridGeometry(tuple(2 * n - 1 for n in self.resolution), self.origin, self.voxel_size / 2.0)


def trilinear_weights(frac: np.ndarray) -> np.ndarray:
    """frac [..., 3] -> corner weights [..., 8] (non-negative, sum to 1)."""
    f = frac[..., None, :]
    w = np.where(CORNER_OFFSETS == 1, f, 1.0 - f)
    return np.prod(w, axis=-1)


def interp_coeffs(corner_values: np.ndarray) -> np.ndarray:
    """
    Polynomial coefficients a0..a7 of v(x,y,z) = a0 + a1x + a2y + a3z + a4xy + a5xz + a6yz + a7xyz
    on the unit cell, from corner values [..., 8] (corner order k = a + 2b + 4c) -> [..., 8].
    """
    v = corner_values
    v000, v100, v010, v110 = v[..., 0], v[..., 1], v[..., 2], v[..., 3]
    v001, v101, v011, v111 = v[..., 4], v[..., 5], v[..., 6], v[..., 7]
    return np.stack(
        [
            v000,
            v100 - v000,
            v010 - v000,
            v001 - v000,
            v110 - v100 - v010 + v000,
            v101 - v100 - v001 + v000,
            v011 - v010 - v001 + v000,
            v111 - v110 - v101 - v011 + v100 + v010 + v001 - v000,
        ],
        axis=-1,
    )


def interp_poly_eval(a: np.ndarray, frac: np.ndarray) -> np.ndarray:
    x, y, z = frac[..., 0], frac[..., 1], frac[..., 2]
    return (
        a[..., 0] + a[..., 1] * x + a[..., 2] * y + a[..., 3] * z
        + a[..., 4] * x * y + a[..., 5] * x * z + a[..., 6] * y * z + a[..., 7] * x * y * z
    )


def interp_poly_grad(a: np.ndarray, frac: np.ndarray) -> np.ndarray:
    """Unit-cell spatial derivative of the trilinear polynomial -> [..., 3]."""
    x, y, z = frac[..., 0], frac[..., 1], frac[..., 2]
    dx = a[..., 1] + a[..., 4] * y + a[..., 5] * z + a[..., 7] * y * z
    dy = a[..., 2] + a[..., 4] * x + a[..., 6] * z + a[..., 7] * x * z
    dz = a[..., 3] + a[..., 5] * x + a[..., 6] * y + a[..., 7] * x * y
    return np.stack([dx, dy, dz], axis=-1)


# -----------------------------
# Gradient accumulator
# -----------------------------
class GradientBuffer:
    """
    Sparse accumulator of per-vertex parameter gradients plus a 6-vector pose gradient.

    Chunks are kept in insertion order and reduced in that order, so the result is
    bit-identical for a fixed sequence of add/merge calls.
    """

    def __init__(self, num_vertices: int) -> None:
        self.num_vertices = int(num_vertices)
        self.pose = np.zeros(6)
        self.out_of_bounds = 0
        self._chunks: List[Tuple[np.ndarray, np.ndarray]] = []

    def add(self, corner_idx: np.ndarray, corner_w: np.ndarray, upstream: np.ndarray) -> None:
        """Scatter upstream [K, 28] through trilinear weights [K, 8] onto corners [K, 8]."""
        if corner_idx.size == 0:
            return
        flat_idx = corner_idx.reshape(-1)
        uniq, inv = np.unique(flat_idx, return_inverse=True)
        vals = np.empty((uniq.size, NUM_CHANNELS))
        w = corner_w.astype(np.float64, copy=False)
        for c in range(NUM_CHANNELS):
            vals[:, c] = np.bincount(inv, weights=(w * upstream[:, c, None]).reshape(-1), minlength=uniq.size)
        self._chunks.append((uniq, vals))

    def merge(self, other: "GradientBuffer") -> "GradientBuffer":
        self._chunks.extend(other._chunks)
        self.pose = self.pose + other.pose
        self.out_of_bounds += other.out_of_bounds
        return self

    def reduce(self) -> Tuple[np.ndarray, np.ndarray]:
        """-> (sorted unique vertex indices [U], gradients [U, 28])."""
        if not self._chunks:
            return np.zeros(0, dtype=np.int64), np.zeros((0, NUM_CHANNELS))
        if len(self._chunks) == 1:
            return self._chunks[0]
        idx = np.concatenate([c[0] for c in self._chunks])
        vals = np.concatenate([c[1] for c in self._chunks])
        uniq, inv = np.unique(idx, return_inverse=True)
        out = np.empty((uniq.size, NUM_CHANNELS))
        for c in range(NUM_CHANNELS):
            out[:, c] = np.bincount(inv, weights=vals[:, c], minlength=uniq.size)
        self._chunks = [(uniq, out)]
        return uniq, out

    def dense(self) -> np.ndarray:
        out = np.zeros((self.num_vertices, NUM_CHANNELS))
        idx, vals = self.reduce()
        out[idx] = vals
        return out

    def is_zero(self) -> bool:
        _, vals = self.reduce()
        return not np.any(vals) and not np.any(self.pose)


# -----------------------------
# Grid
# -----------------------------
class VoxelGrid:
    def __init__(
        self,
        geometry: GridGeometry,
        params: Optional[np.ndarray] = None,
        occupancy: Optional[np.ndarray] = None,
        *,
        dtype: np.dtype | str = np.float32,
    ) -> None:
        self.geometry = geometry
        dtype = np.dtype(dtype)
        if params is None:
            params = np.zeros((geometry.num_vertices, NUM_CHANNELS), dtype=dtype)
        params = np.asarray(params, dtype=dtype)
        if params.shape != (geometry.num_vertices, NUM_CHANNELS):
            raise GridFormatError(
                f"params shape {params.shape} does not match {(geometry.num_vertices, NUM_CHANNELS)}"
            )
        if not np.all(np.isfinite(params)):
            raise GridFormatError("vertex payloads must be finite")
        self.params = params
        if occupancy is None:
            occupancy = np.ones(geometry.num_cells, dtype=bool)
        occupancy = np.asarray(occupancy, dtype=bool).reshape(-1)
        if occupancy.shape != (geometry.num_cells,):
            raise GridFormatError(f"occupancy has {occupancy.size} cells, expected {geometry.num_cells}")
        self.occupancy = occupancy

    @classmethod
    def constant(
        cls,
        geometry: GridGeometry,
        sigma: float = 0.0,
        sh: float | np.ndarray = 0.0,
        *,
        dtype: np.dtype | str = np.float32,
    ) -> "VoxelGrid":
        params = np.zeros((geometry.num_vertices, NUM_CHANNELS), dtype=np.dtype(dtype))
        params[:, SIGMA] = sigma
        params[:, SH_SLICE] = np.asarray(sh, dtype=np.float64).reshape(-1)
        grid = cls(geometry, params, dtype=dtype)
        grid.refresh_occupancy()
        return grid

    @property
    def dtype(self) -> np.dtype:
        return self.params.dtype

    @property
    def sigma(self) -> np.ndarray:
        return self.params[:, SIGMA]

    @property
    def sh(self) -> np.ndarray:
        return self.params[:, SH_SLICE].reshape(-1, 3, SH_BASIS_DIM)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.geometry, self.params.copy(), self.occupancy.copy(), dtype=self.dtype)

    def volume(self) -> np.ndarray:
        """params viewed as [nz, ny, nx, 28]."""
        nx, ny, nz = self.geometry.resolution
        return self.params.reshape(nz, ny, nx, NUM_CHANNELS)

    # -----------------------------
    # Queries
    # -----------------------------
    def corner_weights(self, p: np.ndarray, *, clamp: bool = False):
        """-> (cell [M, 3], corner indices [M, 8], weights [M, 8], frac [M, 3])."""
        cell, frac = self.geometry.locate(p, clamp=clamp)
        return cell, self.geometry.corners(cell), trilinear_weights(frac), frac

    def cell_active(self, p: np.ndarray) -> np.ndarray:
        cell, _ = self.geometry.locate(p, clamp=True)
        return self.occupancy[self.geometry.cell_index(cell)]

    def interpolate(self, p: np.ndarray, *, clamp: bool = False) -> np.ndarray:
        """Raw trilinear blend of all 28 channels at points [M, 3] -> [M, 28] (float64)."""
        _, idx, w, _ = self.corner_weights(np.atleast_2d(p), clamp=clamp)
        return np.einsum("mk,mkc->mc", w, self.params[idx].astype(np.float64))

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    # -----------------------------
    # Occupancy
    # -----------------------------
    def _corner_reduce(self, vertex_values: np.ndarray, op) -> np.ndarray:
        nx, ny, nz = self.geometry.resolution
        v = vertex_values.reshape(nz, ny, nx)
        out = None
        for a, b, c in CORNER_OFFSETS:
            s = v[c : nz - 1 + c, b : ny - 1 + b, a : nx - 1 + a]
            out = s if out is None else op(out, s)
        return out.reshape(-1)

    def refresh_occupancy(self) -> None:
        """A cell is active iff any of its 8 vertices has positive raw density."""
        self.occupancy = self._corner_reduce(self.sigma > 0, np.logical_or).copy()

    def prune(self, threshold: float) -> int:
        """Deactivate cells whose max effective density is below threshold; returns cells pruned."""
        cell_max = self._corner_reduce(np.maximum(self.sigma.astype(np.float64), 0.0), np.maximum)
        drop = self.occupancy & (cell_max < threshold)
        self.occupancy = self.occupancy & ~drop
        n = int(np.count_nonzero(drop))
        log.info("[GRID] pruned %d cells (threshold=%.3g), active=%d", n, threshold, int(self.occupancy.sum()))
        return n

    # -----------------------------
    # Resolution change
    # -----------------------------
    def upsample(self, factor: int = 2, *, max_cells: Optional[int] = None) -> "VoxelGrid":
        """
        Double the cell count on each axis. Every old vertex is a new vertex, and new
        vertices take the trilinear value of the old field, so renders are unchanged.
        """
        if factor != 2:
            raise ResolutionError(f"only factor 2 is supported, got {factor}")
        geo = self.geometry.upsampled()
        if max_cells is not None and max(geo.cells) > max_cells:
            raise ResolutionError(f"upsampled grid would have {max(geo.cells)} cells > max {max_cells}")

        vol = self.volume().astype(np.float64)
        for axis in range(3):
            n = vol.shape[axis]
            shape = list(vol.shape)
            shape[axis] = 2 * n - 1
            out = np.empty(shape)
            even = [slice(None)] * 4
            odd = [slice(None)] * 4
            even[axis] = slice(0, None, 2)
            odd[axis] = slice(1, None, 2)
            lo = [slice(None)] * 4
            hi = [slice(None)] * 4
            lo[axis] = slice(0, n - 1)
            hi[axis] = slice(1, n)
            out[tuple(even)] = vol
            out[tuple(odd)] = 0.5 * (vol[tuple(lo)] + vol[tuple(hi)])
            vol = out

        cx, cy, cz = self.geometry.cells
        occ = self.occupancy.reshape(cz, cy, cx)
        occ = occ.repeat(2, axis=0).repeat(2, axis=1).repeat(2, axis=2)
        log.info("[GRID] upsampled %s -> %s vertices", self.geometry.resolution, geo.resolution)
        return VoxelGrid(geo, vol.reshape(-1, NUM_CHANNELS), occ.reshape(-1), dtype=self.dtype)

    # -----------------------------
    # Serialization (VXGF)
    # -----------------------------
    def to_bytes(self) -> bytes:
        g = self.geometry
        header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, *g.resolution, *g.origin, g.voxel_size)
        payload = np.ascontiguousarray(self.params, dtype="<f4").tobytes()
        bits = np.packbits(self.occupancy, bitorder="little").tobytes()
        return header + payload + bits

    @classmethod
    def from_bytes(cls, data: bytes, *, dtype: np.dtype | str = np.float32) -> "VoxelGrid":
        if len(data) < _HEADER.size:
            raise GridFormatError("grid file truncated (header)")
        magic, version, nx, ny, nz, ox, oy, oz, voxel = _HEADER.unpack_from(data, 0)
        if magic != GRID_MAGIC:
            raise GridFormatError(f"bad magic {magic!r}, expected {GRID_MAGIC!r}")
        if version != GRID_VERSION:
            raise GridFormatError(f"unsupported grid version {version}, expected {GRID_VERSION}")
        try:
            geo = GridGeometry((nx, ny, nz), (ox, oy, oz), voxel)
        except ResolutionError as e:
            raise GridFormatError(f"bad grid header: {e}") from e

        n_payload = geo.num_vertices * NUM_CHANNELS * 4
        n_bits = (geo.num_cells + 7) // 8
        expected = _HEADER.size + n_payload + n_bits
        if len(data) != expected:
            raise GridFormatError(f"grid file has {len(data)} bytes, expected {expected}")

        params = np.frombuffer(data, dtype="<f4", count=geo.num_vertices * NUM_CHANNELS, offset=_HEADER.size)
        bits = np.frombuffer(data, dtype=np.uint8, count=n_bits, offset=_HEADER.size + n_payload)
        occ = np.unpackbits(bits, bitorder="little")[: geo.num_cells].astype(bool)
        return cls(geo, params.reshape(-1, NUM_CHANNELS).astype(dtype), occ, dtype=dtype)

    def save(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(self.to_bytes())
        log.info("[IO] wrote grid %s (%s vertices)", p, self.geometry.resolution)
        return p

    @classmethod
    def load(cls, path: str | Path, *, dtype: np.dtype | str = np.float32) -> "VoxelGrid":
        p = Path(path)
        if not p.exists():
            raise GridFormatError(f"grid file not found: {p}")
        return cls.from_bytes(p.read_bytes(), dtype=dtype)


# -----------------------------
# Point operations
# -----------------------------
def trilerp(grid: VoxelGrid, p: Sequence[float]) -> Tuple[float, np.ndarray]:
    """Raw (pre-activation) density and 3x9 SH coefficients at a world point."""
    v = grid.interpolate(np.asarray(p, dtype=np.float64).reshape(1, 3))[0]
    return float(v[SIGMA]), v[SH_SLICE].reshape(3, SH_BASIS_DIM)


def trilerp_spatial_grad(grid: VoxelGrid, p: Sequence[float]) -> np.ndarray:
    """d value / d p in world units for all 28 channels -> [28, 3]."""
    pts = np.asarray(p, dtype=np.float64).reshape(1, 3)
    _, idx, _, frac = grid.corner_weights(pts)
    corner_vals = grid.params[idx[0]].astype(np.float64).T  # [28, 8]
    a = interp_coeffs(corner_vals)
    return interp_poly_grad(a, np.broadcast_to(frac[0], (NUM_CHANNELS, 3))) / grid.geometry.voxel_size


def scatter_grad(
    buffer: GradientBuffer,
    geometry: GridGeometry,
    p: Sequence[float],
    upstream: np.ndarray,
) -> GradientBuffer:
    """Adjoint of trilerp: add upstream * weight_k to the 8 enclosing vertices."""
    pts = np.asarray(p, dtype=np.float64).reshape(1, 3)
    if not bool(geometry.contains(pts)[0]):
        buffer.out_of_bounds += 1
        log.debug("[GRID] scatter skipped point outside grid: %s", pts[0])
        return buffer
    cell, frac = geometry.locate(pts)
    up = np.broadcast_to(np.asarray(upstream, dtype=np.float64).reshape(1, -1), (1, NUM_CHANNELS))
    buffer.add(geometry.corners(cell), trilinear_weights(frac), up)
    return buffer
