"""Regular voxel lattices, world/grid mapping, trilinear sampling and the VOL1 file format.

Samples live on lattice nodes: node ``(i, j, k)`` sits at
``origin + (i, j, k) * voxel_size``. Grid data is stored as an array of shape
``(Nx, Ny, Nz)`` in C order, so the flat index is ``(ix * Ny + iy) * Nz + iz``
(z fastest).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DomainError, VolumeFormatError

__all__ = [
    "GridDomain",
    "DensityGrid",
    "CarvingGrid",
    "world_to_grid",
    "grid_to_world",
    "sample_trilinear",
    "read_volume",
    "write_volume",
    "decode_volume",
    "VOLUME_MAGIC",
    "VOLUME_HEADER_SIZE",
]

VOLUME_MAGIC = b"VOL1"
# magic, Nx Ny Nz (u32), kind (u8), origin xyz + voxel size (f64)
_HEADER = struct.Struct("<4s3IB4d")
VOLUME_HEADER_SIZE = _HEADER.size
KIND_DENSITY = 0
KIND_BINARY = 1


@dataclass(frozen=True)
class GridDomain:
    """Axis-aligned lattice: x east, y north, z up, meters."""

    origin: tuple[float, float, float] = (-5000.0, -5000.0, 400.0)
    voxel_size: float = 50.0
    dims: tuple[int, int, int] = (200, 200, 72)

    def __post_init__(self):
        origin = tuple(float(c) for c in self.origin)
        dims = tuple(int(n) for n in self.dims)
        if len(origin) != 3 or len(dims) != 3:
            raise ConfigError("origin and dims must have three components")
        if not all(math.isfinite(c) for c in origin):
            raise ConfigError(f"origin must be finite, got {origin}")
        if not (math.isfinite(self.voxel_size) and self.voxel_size > 0):
            raise ConfigError(f"voxel_size must be > 0, got {self.voxel_size}")
        if min(dims) < 1:
            raise ConfigError(f"all dims must be >= 1, got {dims}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def upper(self) -> np.ndarray:
        """World position of the last lattice node."""
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) * self.voxel_size

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World coordinates of the nodes along each axis."""
        return tuple(
            self.origin[a] + np.arange(self.dims[a], dtype=np.float64) * self.voxel_size
            for a in range(3)
        )

    def centers(self) -> np.ndarray:
        """All node positions as an ``(N, 3)`` array in storage order."""
        xs, ys, zs = self.axes()
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": self.voxel_size, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridDomain":
        return cls(origin=tuple(d["origin"]), voxel_size=d["voxel_size"], dims=tuple(d["dims"]))


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _coerce(domain: GridDomain, data, dtype) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.size != domain.size:
        raise ConfigError(f"data has {arr.size} values, domain {domain.dims} needs {domain.size}")
    return arr.reshape(domain.dims)


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Extinction coefficients (1/m) on a lattice, stored as float32."""

    domain: GridDomain
    data: np.ndarray

    def __post_init__(self):
        arr = _coerce(self.domain, self.data, np.float32)
        if not np.all(np.isfinite(arr)):
            raise DomainError("density grid contains non-finite values")
        if np.any(arr < 0):
            raise DomainError("density grid contains negative values")
        object.__setattr__(self, "data", _freeze(arr))

    @classmethod
    def zeros(cls, domain: GridDomain) -> "DensityGrid":
        return cls(domain, np.zeros(domain.dims, dtype=np.float32))


@dataclass(frozen=True, eq=False)
class CarvingGrid:
    """Binary grid: 1 = may be occupied (not carved), 0 = carved empty."""

    domain: GridDomain
    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype == bool:
            raw = raw.astype(np.uint8)
        if not np.all((raw == 0) | (raw == 1)):
            raise DomainError("carving grid values must be 0 or 1")
        object.__setattr__(self, "data", _freeze(_coerce(self.domain, raw, np.uint8)))

    @classmethod
    def ones(cls, domain: GridDomain) -> "CarvingGrid":
        return cls(domain, np.ones(domain.dims, dtype=np.uint8))


def world_to_grid(p, domain: GridDomain) -> np.ndarray:
    """Continuous grid coordinate of world point(s) ``p``; no clamping."""
    return (np.asarray(p, dtype=np.float64) - np.asarray(domain.origin)) / domain.voxel_size


def grid_to_world(g, domain: GridDomain) -> np.ndarray:
    return np.asarray(domain.origin) + np.asarray(g, dtype=np.float64) * domain.voxel_size


def sample_trilinear(grid: DensityGrid, g) -> np.ndarray | float:
    """Trilinear interpolation at continuous grid coordinate(s) ``g`` (shape ``(..., 3)``).

    Any coordinate outside ``[0, dim - 1]`` on any axis samples as 0.
    """
    g = np.asarray(g, dtype=np.float64)
    scalar = g.ndim == 1
    g = np.atleast_2d(g)
    dims = np.asarray(grid.domain.dims)
    data = grid.data

    inside = np.all((g >= 0) & (g <= dims - 1), axis=-1)
    gc = np.where(inside[..., None], g, 0.0)
    i0 = np.minimum(np.floor(gc).astype(np.intp), np.maximum(dims - 2, 0))
    f = gc - i0
    i1 = np.minimum(i0 + 1, dims - 1)

    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1, y1, z1 = i1[..., 0], i1[..., 1], i1[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]

    def lerp(a, b, t):
        return a * (1.0 - t) + b * t

    c00 = lerp(data[x0, y0, z0].astype(np.float64), data[x1, y0, z0], fx)
    c10 = lerp(data[x0, y1, z0].astype(np.float64), data[x1, y1, z0], fx)
    c01 = lerp(data[x0, y0, z1].astype(np.float64), data[x1, y0, z1], fx)
    c11 = lerp(data[x0, y1, z1].astype(np.float64), data[x1, y1, z1], fx)
    value = lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    value = np.where(inside, value, 0.0)
    return float(value[0]) if scalar else value


def write_volume(grid: DensityGrid | CarvingGrid, path: str | PathLike) -> None:
    if isinstance(grid, DensityGrid):
        kind, payload = KIND_DENSITY, grid.data.astype("<f4", copy=False)
    elif isinstance(grid, CarvingGrid):
        kind, payload = KIND_BINARY, grid.data.astype(np.uint8, copy=False)
    else:
        raise ConfigError(f"cannot write {type(grid).__name__} as a volume")
    d = grid.domain
    header = _HEADER.pack(VOLUME_MAGIC, *d.dims, kind, *d.origin, d.voxel_size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(payload).tobytes(order="C"))


def read_volume(path: str | PathLike) -> DensityGrid | CarvingGrid:
    return decode_volume(Path(path).read_bytes())


def decode_volume(buf: bytes) -> DensityGrid | CarvingGrid:
    if len(buf) < 4 or buf[:4] != VOLUME_MAGIC:
        raise VolumeFormatError(f"bad magic {buf[:4]!r}, expected {VOLUME_MAGIC!r}", 0)
    if len(buf) < VOLUME_HEADER_SIZE:
        raise VolumeFormatError("truncated header", len(buf))
    _, nx, ny, nz, kind, ox, oy, oz, vs = _HEADER.unpack_from(buf)
    for axis, n in enumerate((nx, ny, nz)):
        if n < 1:
            raise VolumeFormatError(f"dimension {axis} is zero", 4 + 4 * axis)
    if kind not in (KIND_DENSITY, KIND_BINARY):
        raise VolumeFormatError(f"unknown kind {kind}", 16)
    for i, c in enumerate((ox, oy, oz)):
        if not math.isfinite(c):
            raise VolumeFormatError("non-finite origin", 17 + 8 * i)
    if not (math.isfinite(vs) and vs > 0):
        raise VolumeFormatError(f"invalid voxel size {vs}", 41)

    domain = GridDomain((ox, oy, oz), vs, (nx, ny, nz))
    itemsize = 4 if kind == KIND_DENSITY else 1
    expected = VOLUME_HEADER_SIZE + domain.size * itemsize
    if len(buf) < expected:
        raise VolumeFormatError(f"truncated payload, expected {expected} bytes", len(buf))
    if len(buf) > expected:
        raise VolumeFormatError("trailing bytes after payload", expected)

    dtype = "<f4" if kind == KIND_DENSITY else np.uint8
    flat = np.frombuffer(buf, dtype=dtype, count=domain.size, offset=VOLUME_HEADER_SIZE)
    if kind == KIND_DENSITY:
        bad = ~np.isfinite(flat) | (flat < 0)
    else:
        bad = flat > 1
    if bad.any():
        first = int(np.argmax(bad))
        raise VolumeFormatError("invalid voxel value", VOLUME_HEADER_SIZE + first * itemsize)
    cls = DensityGrid if kind == KIND_DENSITY else CarvingGrid
    return cls(domain, flat.reshape(domain.dims))
