"""Depth carving, silhouette space carving, TSDF fusion and feature backprojection.

All decisions are taken at lattice nodes. A view that cannot see a node
(behind the camera or outside the image) leaves it untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camera import CameraModel, DepthMap, pixel_lookup, signed_view_distance
from .exceptions import ConfigError
from .volume import CarvingGrid, DensityGrid, GridDomain

__all__ = [
    "CarveConfig",
    "FeatureVolume",
    "carve_single_view",
    "combine_carvings",
    "depth_carve",
    "silhouette_carve",
    "tsdf_fuse",
    "tsdf_to_carving",
    "backproject_features",
    "carving_to_density",
    "DEFAULT_FILL_VALUE",
]

# typical cumulus extinction (1/m) for binary-to-density conversion
DEFAULT_FILL_VALUE = 0.04


@dataclass(frozen=True)
class CarveConfig:
    epsilon: float = 1000.0
    min_views: int = 1

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if int(self.min_views) < 1:
            raise ConfigError(f"min_views must be >= 1, got {self.min_views}")


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    domain: GridDomain
    channels: int
    data: np.ndarray  # (Nx, Ny, Nz, C)
    counts: np.ndarray  # (Nx, Ny, Nz)


def _distance_grid(domain: GridDomain, cam: CameraModel, depth: DepthMap) -> np.ndarray:
    return signed_view_distance(cam, depth, domain.centers()).reshape(domain.dims)


def _keep(d: np.ndarray, epsilon: float) -> np.ndarray:
    # keep iff unobserved or D(uv) - z(x) < epsilon
    with np.errstate(invalid="ignore"):
        return np.isnan(d) | (d > -epsilon)


def carve_single_view(domain: GridDomain, cam: CameraModel, depth: DepthMap,
                      cfg: CarveConfig | None = None) -> CarvingGrid:
    cfg = cfg or CarveConfig()
    return CarvingGrid(domain, _keep(_distance_grid(domain, cam, depth), cfg.epsilon))


def _check_same_domain(grids) -> GridDomain:
    if len(grids) == 0:
        raise ConfigError("at least one grid is required")
    domain = grids[0].domain
    for i, g in enumerate(grids):
        if g.domain != domain:
            raise ConfigError(f"grid {i} domain {g.domain} differs from {domain}")
    return domain


def combine_carvings(carvings: Sequence[CarvingGrid]) -> CarvingGrid:
    """Voxelwise product of all carvings."""
    domain = _check_same_domain(carvings)
    out = np.ones(domain.dims, dtype=np.uint8)
    for c in carvings:
        out &= c.data
    return CarvingGrid(domain, out)


def _check_views(cams, images, what: str):
    if len(cams) != len(images):
        raise ConfigError(f"got {len(cams)} cameras but {len(images)} {what}")
    if len(cams) == 0:
        raise ConfigError("at least one view is required")


def depth_carve(domain: GridDomain, cams: Sequence[CameraModel], depths: Sequence[DepthMap],
                cfg: CarveConfig | None = None) -> CarvingGrid:
    """Multi-view depth carving; voxels seen by fewer than ``min_views`` views are kept."""
    cfg = cfg or CarveConfig()
    _check_views(cams, depths, "depth maps")
    keep = np.ones(domain.dims, dtype=bool)
    seen = np.zeros(domain.dims, dtype=np.int32)
    for cam, depth in zip(cams, depths):
        d = _distance_grid(domain, cam, depth)
        keep &= _keep(d, cfg.epsilon)
        seen += ~np.isnan(d)
    if cfg.min_views > 1:
        keep |= seen < cfg.min_views
    return CarvingGrid(domain, keep)


def silhouette_carve(domain: GridDomain, cams: Sequence[CameraModel], masks: Sequence[np.ndarray]) -> CarvingGrid:
    """Visual hull: a voxel survives unless some view sees it on a non-cloud pixel."""
    _check_views(cams, masks, "masks")
    centers = domain.centers()
    keep = np.ones(domain.size, dtype=bool)
    for cam, mask in zip(cams, masks):
        mask = np.asarray(mask)
        if mask.shape != (cam.height, cam.width):
            raise ConfigError(f"mask shape {mask.shape} does not match camera {cam.height}x{cam.width}")
        row, col, _, observed = pixel_lookup(cam, centers)
        keep &= ~observed | (mask[row, col] != 0)
    return CarvingGrid(domain, keep.reshape(domain.dims))


def tsdf_fuse(domain: GridDomain, cams: Sequence[CameraModel], depths: Sequence[DepthMap],
              truncation: float = 1000.0) -> np.ndarray:
    """Mean truncated signed distance over observing views, in [-1, 1]; 0 where unobserved."""
    if not truncation > 0:
        raise ConfigError("truncation must be > 0")
    _check_views(cams, depths, "depth maps")
    total = np.zeros(domain.dims)
    count = np.zeros(domain.dims, dtype=np.int32)
    for cam, depth in zip(cams, depths):
        d = _distance_grid(domain, cam, depth)
        seen = ~np.isnan(d)
        total += np.where(seen, np.clip(np.nan_to_num(d, nan=0.0) / truncation, -1.0, 1.0), 0.0)
        count += seen
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def tsdf_to_carving(domain: GridDomain, tsdf: np.ndarray, level: float = 0.0) -> CarvingGrid:
    """Threshold a fused TSDF: keep voxels at or behind the fused surface."""
    return CarvingGrid(domain, np.asarray(tsdf).reshape(domain.dims) >= level)


def backproject_features(domain: GridDomain, cams: Sequence[CameraModel],
                         feature_images: Sequence[np.ndarray]) -> FeatureVolume:
    """Average per-pixel feature vectors over all views that see each voxel."""
    _check_views(cams, feature_images, "feature images")
    images = [np.asarray(f, dtype=np.float64) for f in feature_images]
    images = [f[..., None] if f.ndim == 2 else f for f in images]
    channels = images[0].shape[-1]
    for cam, img in zip(cams, images):
        if img.shape[-1] != channels:
            raise ConfigError(f"feature images disagree on channel count ({img.shape[-1]} vs {channels})")
        if img.shape[:2] != (cam.height, cam.width):
            raise ConfigError("feature image size does not match camera resolution")
    centers = domain.centers()
    total = np.zeros((domain.size, channels))
    count = np.zeros(domain.size, dtype=np.int32)
    for cam, img in zip(cams, images):
        row, col, _, observed = pixel_lookup(cam, centers)
        total[observed] += img[row[observed], col[observed]]
        count += observed
    mean = np.divide(total, count[:, None], out=np.zeros_like(total), where=count[:, None] > 0)
    return FeatureVolume(domain, channels, mean.reshape(*domain.dims, channels), count.reshape(domain.dims))


def carving_to_density(c: CarvingGrid, fill_value: float = DEFAULT_FILL_VALUE) -> DensityGrid:
    if not fill_value >= 0:
        raise ConfigError("fill_value must be >= 0")
    return DensityGrid(c.domain, c.data.astype(np.float32) * np.float32(fill_value))
