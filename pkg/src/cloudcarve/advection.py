"""Horizontal advection, variance-minimizing wind fit and multi-frame integration.

Frames ``0..T-1`` are advected to the center time ``t_c = (T - 1) / 2``:
frame ``i`` is moved by ``(u, v) * (t_c - i) * frame_interval``, which undoes
a translation that carried the scene forward by ``(u, v)`` per second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .exceptions import ConfigError, DomainError
from .volume import DensityGrid, GridDomain

__all__ = [
    "WindProfile",
    "SequenceConfig",
    "advect",
    "center_time",
    "frame_offsets",
    "wind_objective",
    "fit_wind",
    "integrate",
    "candidate_grid",
]

# shifts closer than this to an integer number of voxels are snapped to it
_SNAP = 1e-9


@dataclass(frozen=True)
class WindProfile:
    u: float
    v: float
    objective: float = 0.0
    evaluations: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.objective) and self.objective >= 0):
            raise DomainError(f"wind objective must be finite and >= 0, got {self.objective}")

    def to_dict(self) -> dict:
        return {"u": self.u, "v": self.v, "objective": self.objective, "evaluations": self.evaluations}


@dataclass(frozen=True)
class SequenceConfig:
    frame_interval: float = 5.0
    window: int = 20
    u_max: float = 30.0
    coarse_step: float = 2.0
    refine_step: float = 0.25
    # "interior": score only columns that every searchable wind backtraces inside the grid;
    # "full": every column, with empty space entering at the boundary
    boundary: str = "interior"

    def __post_init__(self):
        if not self.frame_interval > 0:
            raise ConfigError("frame_interval must be > 0")
        if int(self.window) < 1:
            raise ConfigError("window must be >= 1")
        if not (self.u_max >= 0 and self.coarse_step > 0 and self.refine_step > 0):
            raise ConfigError("search bounds and steps must be positive")
        if self.refine_step > self.coarse_step:
            raise ConfigError("refine_step must not exceed coarse_step")
        if self.boundary not in ("interior", "full"):
            raise ConfigError(f"boundary must be 'interior' or 'full', got {self.boundary!r}")

    @property
    def search_bound(self) -> float:
        """Largest wind component the search can visit (refinement may step past ``u_max``)."""
        return self.u_max + self.coarse_step


def _check_finite(**values):
    for name, value in values.items():
        if not math.isfinite(value):
            raise DomainError(f"{name} must be finite, got {value}")


def _voxel_shift(distance: float, voxel_size: float) -> float:
    s = distance / voxel_size
    r = round(s)
    return float(r) if abs(s - r) < _SNAP else s


def _taps(n: int, shift: float) -> tuple[int, int, float, float, np.ndarray]:
    """Interpolation taps for ``out[i] = f(i - shift)`` along one axis.

    Returns index arrays and weights of shape ``(n,)``; out-of-range samples
    get zero weights.
    """
    g = np.arange(n, dtype=np.float64) - shift
    valid = (g >= 0) & (g <= n - 1)
    gc = np.where(valid, g, 0.0)
    i0 = np.minimum(np.floor(gc).astype(np.intp), max(n - 2, 0))
    f = gc - i0
    i1 = np.minimum(i0 + 1, n - 1)
    w0 = np.where(valid, 1.0 - f, 0.0)
    w1 = np.where(valid, f, 0.0)
    i0 = np.where(valid, i0, 0)
    i1 = np.where(valid, i1, 0)
    return i0, i1, w0, w1


def _shift_xy(data: np.ndarray, sx: float, sy: float) -> np.ndarray:
    """Bilinear horizontal translation, ``out(x, y) = data(x - sx, y - sy)``.

    Same arithmetic order as trilinear sampling, so results match
    ``sample_trilinear`` bit for bit.
    """
    nx, ny, _ = data.shape
    xi0, xi1, xw0, xw1 = _taps(nx, sx)
    yi0, yi1, yw0, yw1 = _taps(ny, sy)
    f = data.astype(np.float64, copy=False)
    # rows first (x), then columns (y)
    fx = f[xi0] * xw0[:, None, None] + f[xi1] * xw1[:, None, None]
    return fx[:, yi0] * yw0[None, :, None] + fx[:, yi1] * yw1[None, :, None]


def advect(grid: DensityGrid, u: float, v: float, dt: float) -> DensityGrid:
    """Semi-Lagrangian translation: ``out(x) = grid(x - (u, v, 0) * dt)``."""
    _check_finite(u=u, v=v, dt=dt)
    vs = grid.domain.voxel_size
    sx = _voxel_shift(u * dt, vs)
    sy = _voxel_shift(v * dt, vs)
    if sx == 0.0 and sy == 0.0:
        return grid
    out = _shift_xy(grid.data, sx, sy)
    return DensityGrid(grid.domain, np.maximum(out, 0.0))


def center_time(T: int) -> float:
    return (T - 1) / 2


def frame_offsets(T: int, frame_interval: float) -> np.ndarray:
    """Time (s) by which frame ``i`` is advected to reach the center time."""
    return (center_time(T) - np.arange(T)) * frame_interval


def _common_domain(frames: Sequence[DensityGrid]) -> GridDomain:
    if len(frames) == 0:
        raise ConfigError("at least one frame is required")
    domain = frames[0].domain
    for i, f in enumerate(frames):
        if not isinstance(f, DensityGrid):
            raise ConfigError(f"frame {i} is a {type(f).__name__}, expected DensityGrid")
        if f.domain != domain:
            raise ConfigError(f"frame {i} domain {f.domain} differs from frame 0 domain {domain}")
    return domain


def _scored_columns(domain: GridDomain, cfg: SequenceConfig, reach: float) -> tuple[int, int, int, int]:
    """Horizontal index ranges ``[x0, x1) x [y0, y1)`` that enter the objective.

    Outside the grid nothing is known, yet advection fills it with empty
    space. Columns near the boundary would then see a variance that depends
    on the candidate wind, so the interior mode drops every column that some
    candidate backtraces out of the grid. The margin is the same for all
    candidates, which keeps their objectives comparable.
    """
    nx, ny = domain.dims[:2]
    if cfg.boundary == "full":
        return 0, nx, 0, ny
    m = int(math.ceil(cfg.search_bound * reach / domain.voxel_size - 1e-9))
    mx = min(m, (nx - 1) // 2)
    my = min(m, (ny - 1) // 2)
    return mx, nx - mx, my, ny - my


class _Objective:
    """Evaluates the mean-variance objective for many winds on one frame stack."""

    def __init__(self, frames: Sequence[DensityGrid], cfg: SequenceConfig):
        self.domain = _common_domain(frames)
        self.T = len(frames)
        self.offsets = frame_offsets(self.T, cfg.frame_interval)
        self.bounds = _scored_columns(self.domain, cfg, float(np.abs(self.offsets).max()))
        stack = np.stack([f.data for f in frames])
        # z levels empty in every frame have zero variance for every wind
        levels = np.flatnonzero(np.any(stack != 0, axis=(0, 1, 2)))
        if levels.size:
            stack = stack[..., levels[0]: levels[-1] + 1]
        else:
            stack = stack[..., :0]
        self.frames = np.ascontiguousarray(stack)
        self.colmask = np.ascontiguousarray(np.any(self.frames != 0, axis=3)) if levels.size else None
        self.evaluations = 0

    def __call__(self, u: float, v: float) -> float:
        _check_finite(u=u, v=v)
        self.evaluations += 1
        if self.T == 1 or self.colmask is None:
            return 0.0
        nx, ny = self.domain.dims[:2]
        vs = self.domain.voxel_size
        taps_x = [_taps(nx, _voxel_shift(u * dt, vs)) for dt in self.offsets]
        taps_y = [_taps(ny, _voxel_shift(v * dt, vs)) for dt in self.offsets]
        xi0, xi1, xw0, xw1 = (np.ascontiguousarray(np.stack(a)) for a in zip(*taps_x))
        yi0, yi1, yw0, yw1 = (np.ascontiguousarray(np.stack(a)) for a in zip(*taps_y))
        x0, x1, y0, y1 = self.bounds
        rows = _kernels.variance_row_sums(self.frames, self.colmask, xi0, xi1, xw0, xw1, yi0, yi1, yw0, yw1,
                                          x0, x1, y0, y1)
        return _kernels.ordered_sum(rows) / ((x1 - x0) * (y1 - y0) * self.domain.dims[2])


def wind_objective(frames: Sequence[DensityGrid], u: float, v: float, cfg: SequenceConfig | None = None) -> float:
    """Mean of the per-voxel population variance across the advected frames.

    The mean runs over the whole grid or, by default, over the interior
    columns described in ``SequenceConfig.boundary``.
    """
    cfg = cfg or SequenceConfig()
    return _Objective(frames, cfg)(u, v)


def candidate_grid(center: tuple[float, float], half_width: float, step: float) -> list[tuple[float, float]]:
    k = int(math.floor(half_width / step + 1e-9))
    offs = [j * step for j in range(-k, k + 1)]
    return [(center[0] + a, center[1] + b) for a in offs for b in offs]


def _better(a: tuple[float, float, float], b: tuple[float, float, float] | None) -> bool:
    """Strict ordering: objective, then wind magnitude, then (u, v)."""
    if b is None:
        return True
    ka = (a[0], math.hypot(a[1], a[2]), a[1], a[2])
    kb = (b[0], math.hypot(b[1], b[2]), b[1], b[2])
    return ka < kb


def fit_wind(frames: Sequence[DensityGrid], cfg: SequenceConfig | None = None) -> WindProfile:
    """Coarse grid search over ``[-u_max, u_max]^2`` then a refinement around the best node."""
    cfg = cfg or SequenceConfig()
    objective = _Objective(frames, cfg)
    if objective.T == 1:
        return WindProfile(0.0, 0.0, 0.0, 0)

    cache: dict[tuple[float, float], float] = {}
    best = None

    def visit(candidates):
        nonlocal best
        for u, v in candidates:
            key = (u + 0.0, v + 0.0)
            if key not in cache:
                cache[key] = objective(*key)
            entry = (cache[key], key[0], key[1])
            if _better(entry, best):
                best = entry

    visit(candidate_grid((0.0, 0.0), cfg.u_max, cfg.coarse_step))
    visit(candidate_grid((best[1], best[2]), cfg.coarse_step, cfg.refine_step))
    return WindProfile(best[1], best[2], best[0], objective.evaluations)


def integrate(frames: Sequence[DensityGrid], wind: WindProfile, cfg: SequenceConfig | None = None) -> DensityGrid:
    """Mean of all frames advected to the center time."""
    cfg = cfg or SequenceConfig()
    domain = _common_domain(frames)
    _check_finite(u=wind.u, v=wind.v)
    acc = np.zeros(domain.dims, dtype=np.float64)
    for frame, dt in zip(frames, frame_offsets(len(frames), cfg.frame_interval)):
        acc += advect(frame, wind.u, wind.v, float(dt)).data
    acc /= len(frames)
    return DensityGrid(domain, np.maximum(acc, 0.0))
