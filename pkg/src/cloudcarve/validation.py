"""Input checks shared by the estimators, the pipeline and the CLI."""

from __future__ import annotations

import numpy as np

from .camera import CameraModel, DepthMap
from .exceptions import ConfigError
from .volume import CarvingGrid, DensityGrid, GridDomain

__all__ = ["check_domain", "check_frames", "check_views", "check_positive", "check_thread_count"]


def check_domain(domain) -> GridDomain:
    if isinstance(domain, GridDomain):
        return domain
    if isinstance(domain, dict):
        return GridDomain.from_dict(domain)
    raise ConfigError(f"expected a GridDomain or a dict, got {type(domain).__name__}")


def check_frames(frames, domain: GridDomain | None = None) -> list[DensityGrid]:
    """A non-empty list of density grids that share one domain.

    Carving grids are accepted and converted to 0/1 densities.
    """
    if isinstance(frames, (DensityGrid, CarvingGrid)):
        frames = [frames]
    frames = list(frames)
    if not frames:
        raise ConfigError("at least one frame is required")
    out = []
    for i, f in enumerate(frames):
        if isinstance(f, CarvingGrid):
            f = DensityGrid(f.domain, f.data.astype(np.float32))
        if not isinstance(f, DensityGrid):
            raise ConfigError(f"frame {i} is a {type(f).__name__}, expected a DensityGrid")
        out.append(f)
    ref = domain or out[0].domain
    for i, f in enumerate(out):
        if f.domain != ref:
            raise ConfigError(f"frame {i} lives on {f.domain}, expected {ref}")
    return out


def check_views(views) -> tuple[list[CameraModel], list[DepthMap]]:
    """Split ``[(camera, depth_map), ...]`` and check image sizes."""
    cams, depths = [], []
    for i, item in enumerate(views):
        try:
            cam, depth = item
        except (TypeError, ValueError):
            raise ConfigError(f"view {i} must be a (camera, depth map) pair") from None
        if not isinstance(cam, CameraModel):
            raise ConfigError(f"view {i}: expected a CameraModel, got {type(cam).__name__}")
        if not isinstance(depth, DepthMap):
            depth = DepthMap(np.asarray(depth, dtype=np.float32))
        if depth.data.shape != (cam.height, cam.width):
            raise ConfigError(f"view {i}: depth map {depth.data.shape} does not match camera "
                              f"{cam.height}x{cam.width}")
        cams.append(cam)
        depths.append(depth)
    if not cams:
        raise ConfigError("at least one view is required")
    return cams, depths


def check_positive(name: str, value, allow_zero: bool = False) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    ok = value >= 0 if allow_zero else value > 0
    if not (ok and np.isfinite(value)):
        raise ConfigError(f"{name} must be {'>=' if allow_zero else '>'} 0, got {value}")
    return value


def check_thread_count(n) -> int:
    if n is None:
        return 0
    if isinstance(n, bool) or int(n) != n or int(n) < 1:
        raise ConfigError(f"thread count must be a positive integer, got {n!r}")
    return int(n)
