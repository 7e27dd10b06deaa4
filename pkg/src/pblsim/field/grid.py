"""Explicit voxel scene with trilinear lookup."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

CHANNELS = ("density", "intensity", "reflectivity", "drop")
VALUE_CHANNELS = ("intensity", "reflectivity", "drop")

# corner offsets in (x, y, z) bit order
_CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


@dataclass
class VoxelField:
    """Cell-centered grid. ``density`` is in 1/m, other channels in ``[0, 1]``."""

    dims: Tuple[int, int, int]
    cell_size: float
    origin: np.ndarray
    density: np.ndarray
    intensity: np.ndarray
    reflectivity: np.ndarray
    drop: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        for name in CHANNELS:
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != self.dims:
                raise ValueError(f"{name} has shape {a.shape}, expected {self.dims}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            setattr(self, name, a)
        if np.any(self.density < 0):
            raise ValueError("density must be non-negative")

    @classmethod
    def empty(cls, dims, cell_size=0.5, origin=(0.0, 0.0, 0.0), intensity=0.0,
              reflectivity=0.0) -> "VoxelField":
        dims = tuple(int(n) for n in dims)
        z = np.zeros(dims)
        return cls(dims, cell_size, origin, z.copy(), np.full(dims, float(intensity)),
                   np.full(dims, float(reflectivity)), z.copy())

    @classmethod
    def centered(cls, dims=(128, 128, 128), cell_size=0.5, center=(0.0, 0.0, 0.0)) -> "VoxelField":
        half = np.asarray(dims, dtype=np.float64) * cell_size / 2
        return cls.empty(dims, cell_size, np.asarray(center) - half)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.asarray(self.dims) * self.cell_size

    def cell_centers(self) -> np.ndarray:
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.cell_size for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def flat(self, name) -> np.ndarray:
        return getattr(self, name).reshape(-1)

    def copy(self) -> "VoxelField":
        return VoxelField(self.dims, self.cell_size, self.origin.copy(),
                          *(getattr(self, c).copy() for c in CHANNELS))

    def with_channels(self, **channels) -> "VoxelField":
        f = self.copy()
        for k, v in channels.items():
            if k not in CHANNELS:
                raise KeyError(k)
            setattr(f, k, np.asarray(v, dtype=np.float64).reshape(self.dims))
        f.__post_init__()
        return f

    def occupancy_blocks(self) -> np.ndarray:
        """``occ[i,j,k]`` is set when any density in the 2x2x2 block at ``(i,j,k)`` is non-zero."""
        nz = self.density > 0
        p = np.pad(nz, ((0, 1), (0, 1), (0, 1)), mode="edge")
        out = np.zeros(self.dims, dtype=bool)
        for dx, dy, dz in _CORNERS:
            out |= p[dx:dx + self.dims[0], dy:dy + self.dims[1], dz:dz + self.dims[2]]
        return out


@dataclass
class Trilinear:
    """Corner indices and weights of a batch of lookup positions."""

    idx: np.ndarray      # (S, 8) flat cell indices
    w: np.ndarray        # (S, 8)
    frac: np.ndarray     # (S, 3)
    inside: np.ndarray   # (S,)

    def gather(self, flat_values):
        return np.einsum("sc,sc->s", self.w, flat_values[self.idx])

    def weight_gradients(self, cell_size):
        """``dw/dx`` with shape (S, 8, 3)."""
        f = self.frac
        fac = np.where(_CORNERS[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
        sign = np.where(_CORNERS == 1, 1.0, -1.0)
        g = np.empty(fac.shape)
        g[..., 0] = sign[None, :, 0] * fac[..., 1] * fac[..., 2]
        g[..., 1] = sign[None, :, 1] * fac[..., 0] * fac[..., 2]
        g[..., 2] = sign[None, :, 2] * fac[..., 0] * fac[..., 1]
        g *= self.inside[:, None, None]
        return g / cell_size

    def gradient(self, flat_values, cell_size):
        """Spatial gradient (S, 3) of the interpolated field."""
        return np.einsum("sci,sc->si", self.weight_gradients(cell_size), flat_values[self.idx])


def trilinear(fld: VoxelField, x) -> Trilinear:
    """Trilinear weights over cell centers; positions outside the box get zero weight.

    Inside the box, lookups within half a cell of a face replicate the border
    cell.
    """
    x = np.asarray(x, dtype=np.float64)
    nx, ny, nz = fld.dims
    rel = (x - fld.origin) / fld.cell_size
    inside = np.all((rel >= 0) & (rel <= fld.dims), axis=1)
    u = rel - 0.5
    i0 = np.floor(u)
    frac = u - i0
    i0 = i0.astype(np.int64)
    top = np.array([nx - 1, ny - 1, nz - 1])
    lo = np.minimum(np.maximum(i0, 0), top)
    hi = np.minimum(np.maximum(i0 + 1, 0), top)
    ax = (lo[:, 0] * ny, hi[:, 0] * ny)
    ay = (lo[:, 1], hi[:, 1])
    az = (lo[:, 2], hi[:, 2])
    fx = (1.0 - frac[:, 0], frac[:, 0])
    fy = (1.0 - frac[:, 1], frac[:, 1])
    fz = (1.0 - frac[:, 2], frac[:, 2])
    idx = np.empty((len(x), 8), dtype=np.int64)
    w = np.empty((len(x), 8))
    fz = (fz[0] * inside, fz[1] * inside)
    for c, (bx, by, bz) in enumerate(_CORNERS):
        idx[:, c] = (ax[bx] + ay[by]) * nz + az[bz]
        w[:, c] = fx[bx] * fy[by] * fz[bz]
    return Trilinear(idx, w, frac, inside)


def sample_field(fld: VoxelField, x, channels=CHANNELS) -> Dict[str, np.ndarray]:
    tl = trilinear(fld, x)
    return {c: tl.gather(fld.flat(c)) for c in channels}
