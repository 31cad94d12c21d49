"""Opacity rendering and segmentation metrics (Jaccard, coverage error, split L1)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import _kernels
from .camera import CameraModel
from .exceptions import ConfigError
from .synthetic import camera_rays
from .volume import DensityGrid

__all__ = [
    "OpacityMap",
    "MetricsReport",
    "render_opacity",
    "segment",
    "jaccard",
    "coverage_error",
    "split_l1",
    "evaluate",
    "cloud_base_heights",
    "save_png",
]


@dataclass(frozen=True, eq=False)
class OpacityMap:
    opacity: np.ndarray  # (H, W) in [0, 1]
    depth: np.ndarray  # (H, W) z-depth (m), +inf where nothing is absorbed

    def __post_init__(self):
        if self.opacity.shape != self.depth.shape:
            raise ConfigError("opacity and depth images differ in shape")
        if np.any((self.opacity < 0) | (self.opacity > 1)):
            raise ConfigError("opacity values must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.opacity.shape[1]

    @property
    def height(self) -> int:
        return self.opacity.shape[0]


@dataclass(frozen=True)
class MetricsReport:
    jaccard: float | None
    coverage_error: float
    split_l1: float | None = None
    n_cloud: int = 0
    n_empty: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def clear_sky(self) -> bool:
        return self.jaccard is None

    @classmethod
    def mean(cls, reports: Sequence["MetricsReport"]) -> "MetricsReport":
        """Average over reports; Jaccard averages only non-clear-sky entries."""
        if not reports:
            raise ConfigError("cannot average zero reports")
        jac = [r.jaccard for r in reports if r.jaccard is not None]
        l1 = [r.split_l1 for r in reports]
        return cls(
            jaccard=float(np.mean(jac)) if jac else None,
            coverage_error=float(np.mean([r.coverage_error for r in reports])),
            split_l1=float(np.mean(l1)) if all(x is not None for x in l1) else None,
            n_cloud=int(round(np.mean([r.n_cloud for r in reports]))),
            n_empty=int(round(np.mean([r.n_empty for r in reports]))),
        )


def render_opacity(grid: DensityGrid, cam: CameraModel, step: float = 25.0) -> OpacityMap:
    """Beer-Lambert opacity ``1 - exp(-tau)`` per pixel.

    The depth channel is the z-depth at which the accumulated opacity reaches
    half of the pixel's final opacity (the 50 % transmittance point for opaque
    rays).
    """
    if not step > 0:
        raise ConfigError("step must be > 0")
    dirs, norm, center, t0, t1 = camera_rays(grid, cam)
    d = grid.domain
    tau, t_half = _kernels.march_optical_depth(grid.data, np.asarray(d.origin), d.voxel_size, center,
                                               dirs, t0, t1, float(step))
    shape = (cam.height, cam.width)
    opacity = -np.expm1(-tau)
    return OpacityMap(opacity.reshape(shape), (t_half / norm).reshape(shape))


def segment(om: OpacityMap, opacity_threshold: float = 0.15, depth_threshold: float = 4000.0) -> np.ndarray:
    """Cloud mask: opaque enough and close enough (far pixels count as background)."""
    if not (0 <= opacity_threshold <= 1 and depth_threshold > 0):
        raise ConfigError("invalid segmentation thresholds")
    return ((om.opacity >= opacity_threshold) & (om.depth <= depth_threshold)).astype(np.uint8)


def _masks(gt, pred) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt) != 0
    pred = np.asarray(pred) != 0
    if gt.shape != pred.shape:
        raise ConfigError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    return gt, pred


def jaccard(gt, pred) -> float | None:
    """Intersection over union in percent; ``None`` when both masks are empty (clear sky)."""
    gt, pred = _masks(gt, pred)
    union = int(np.count_nonzero(gt | pred))
    if union == 0:
        return None
    return 100.0 * int(np.count_nonzero(gt & pred)) / union


def coverage_error(gt, pred) -> float:
    gt, pred = _masks(gt, pred)
    n = gt.size
    return 100.0 * abs(int(np.count_nonzero(gt)) / n - int(np.count_nonzero(pred)) / n)


def _exact_sum(x: np.ndarray) -> Fraction:
    """Exact sum of float32 values.

    Each value is ``mantissa * 2**exponent`` with an integer mantissa of at
    most 24 bits; mantissas sharing an exponent are summed in int64.
    """
    m, e = np.frexp(np.asarray(x, dtype=np.float32).reshape(-1).astype(np.float64))
    mant = (m * (1 << 24)).astype(np.int64)
    order = np.argsort(e, kind="stable")
    e, mant = e[order], mant[order]
    if e.size == 0:
        return Fraction(0)
    starts = np.flatnonzero(np.r_[True, e[1:] != e[:-1]])
    sums = np.add.reduceat(mant, starts)
    total = Fraction(0)
    for exp, s in zip(e[starts].tolist(), sums.tolist()):
        total += Fraction(s) * Fraction(2) ** (exp - 24)
    return total


def _exact_abs_diff_sum(g: np.ndarray, p: np.ndarray) -> Fraction:
    """``sum |g - p|`` in exact arithmetic."""
    ge = g >= p
    return (_exact_sum(g[ge]) - _exact_sum(p[ge])) + (_exact_sum(p[~ge]) - _exact_sum(g[~ge]))


def split_l1(gt: DensityGrid, pred: DensityGrid, lam: float = 1.0) -> float:
    """Mean absolute error over cloud voxels plus ``lam`` times the mean over empty voxels.

    Cloud voxels are those with ground truth > 0. Both means are computed
    exactly and rounded once, so the result is independent of summation order.
    """
    if gt.domain != pred.domain:
        raise ConfigError("ground truth and prediction live on different domains")
    if not 0 <= lam <= 1:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    g = gt.data.reshape(-1)
    p = pred.data.reshape(-1)
    cloud = g > 0
    n_cloud = int(np.count_nonzero(cloud))
    n_empty = g.size - n_cloud
    first = float(_exact_abs_diff_sum(g[cloud], p[cloud]) / n_cloud) if n_cloud else 0.0
    second = float(_exact_abs_diff_sum(g[~cloud], p[~cloud]) / n_empty) if n_empty else 0.0
    return first + lam * second


def evaluate(gt: DensityGrid, pred: DensityGrid, cam: CameraModel, opacity_threshold: float = 0.15,
             depth_threshold: float = 4000.0, step: float = 25.0, lam: float | None = 1.0) -> MetricsReport:
    """Segment opacity renderings of both grids from ``cam`` and compare them."""
    gt_mask = segment(render_opacity(gt, cam, step), opacity_threshold, depth_threshold)
    pred_mask = segment(render_opacity(pred, cam, step), opacity_threshold, depth_threshold)
    n_cloud = int(np.count_nonzero(gt.data > 0))
    return MetricsReport(
        jaccard=jaccard(gt_mask, pred_mask),
        coverage_error=coverage_error(gt_mask, pred_mask),
        split_l1=None if lam is None else split_l1(gt, pred, lam),
        n_cloud=n_cloud,
        n_empty=gt.domain.size - n_cloud,
    )


def cloud_base_heights(grid: DensityGrid, level: float = 0.0) -> np.ndarray:
    """Altitude of the lowest node above ``level`` in every column that has one."""
    occ = grid.data > level
    columns = occ.any(axis=2)
    lowest = np.argmax(occ, axis=2)[columns]
    return grid.domain.origin[2] + lowest * grid.domain.voxel_size


def save_png(image: np.ndarray, path) -> None:
    """Write a [0, 1] float or binary image as 8-bit grayscale."""
    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    Image.fromarray(np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8), mode="L").save(path)
