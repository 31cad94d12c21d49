"""Procedural cumulus layers, translating sequences and stand-in depth sensing."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .advection import advect, center_time
from .camera import CameraModel, DepthMap, pixel_lookup
from .exceptions import ConfigError
from .volume import DensityGrid, GridDomain

__all__ = [
    "SceneParams",
    "DepthNoise",
    "SURFACE_DENSITY",
    "gradient_noise",
    "vertical_profile",
    "generate_cloud_field",
    "generate_sequence",
    "field_at",
    "add_edge_band",
    "ray_box_interval",
    "camera_rays",
    "render_depth",
    "corrupt_depth",
    "render_silhouette",
]

# density at which one 50 m voxel alone reaches 0.15 opacity: -ln(0.85) / 50
SURFACE_DENSITY = -math.log(1 - 0.15) / 50.0


@dataclass(frozen=True)
class SceneParams:
    cloud_fraction: float = 0.4
    optical_density: float = 0.05
    base_altitude: float = 1000.0
    cloud_height: float = 600.0
    sun_azimuth: float = 180.0
    sun_zenith: float = 30.0
    seed: int = 0
    noise_scale: float = 1500.0

    def validate(self, domain: GridDomain) -> None:
        floor = domain.origin[2]
        ceiling = float(domain.upper[2])
        if not 0 <= self.cloud_fraction <= 1:
            raise ConfigError(f"cloud_fraction must lie in [0, 1], got {self.cloud_fraction}")
        if not self.optical_density > 0:
            raise ConfigError("optical_density must be > 0")
        if not self.cloud_height > 0:
            raise ConfigError("cloud_height must be > 0")
        if not self.noise_scale > 0:
            raise ConfigError("noise_scale must be > 0")
        if self.base_altitude < floor or self.base_altitude + self.cloud_height > ceiling:
            raise ConfigError(
                f"cloud layer [{self.base_altitude}, {self.base_altitude + self.cloud_height}] m "
                f"leaves the domain [{floor}, {ceiling}] m"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DepthNoise:
    gaussian_std: float = 0.0
    dropout_prob: float = 0.0
    quantization: float = 0.0

    def __post_init__(self):
        if min(self.gaussian_std, self.dropout_prob, self.quantization) < 0:
            raise ConfigError("depth noise parameters must be >= 0")
        if self.dropout_prob > 1:
            raise ConfigError("dropout_prob must be <= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _perlin(x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    perm = rng.permutation(256)
    perm = np.concatenate([perm, perm])
    angles = rng.uniform(0, 2 * np.pi, 256)
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    xi = np.floor(x).astype(np.int64)
    yi = np.floor(y).astype(np.int64)
    xf = x - xi
    yf = y - yi
    xi &= 255
    yi &= 255

    def corner(dx, dy):
        h = perm[perm[(xi + dx) & 255] + ((yi + dy) & 255)]
        g = grads[h]
        return g[..., 0] * (xf - dx) + g[..., 1] * (yf - dy)

    u = _fade(xf)
    v = _fade(yf)
    n0 = corner(0, 0) * (1 - u) + corner(1, 0) * u
    n1 = corner(0, 1) * (1 - u) + corner(1, 1) * u
    return n0 * (1 - v) + n1 * v


def gradient_noise(x, y, scale: float, seed: int, octaves: int = 4, persistence: float = 0.5) -> np.ndarray:
    """Fractal 2-D gradient noise; the first octave has feature size ``scale`` (m)."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    total = np.zeros(np.broadcast(x, y).shape)
    amp, freq = 1.0, 1.0 / scale
    # random lattice offset per octave decorrelates octaves at the origin
    for _ in range(octaves):
        ox, oy = rng.uniform(0, 256, 2)
        total += amp * _perlin(x * freq + ox, y * freq + oy, rng)
        amp *= persistence
        freq *= 2.0
    return total


def vertical_profile(z, base: float, height: float) -> np.ndarray:
    """Flat-bottomed bump on ``[base, base + height]``: sharp rise over the lowest
    15 % of the layer, rounded top over the upper 60 %."""
    s = (np.asarray(z, dtype=np.float64) - base) / height

    def smoothstep(t):
        t = np.clip(t, 0.0, 1.0)
        return t * t * (3 - 2 * t)

    p = smoothstep(s / 0.15) * smoothstep((1 - s) / 0.6)
    return np.where((s > 0) & (s < 1), p, 0.0)


def _layer_stats(domain: GridDomain, params: SceneParams) -> tuple[float, float, float]:
    """Noise normalization range and coverage threshold measured over ``domain``."""
    xs, ys, _ = domain.axes()
    n = gradient_noise(xs[:, None], ys[None, :], params.noise_scale, params.seed)
    lo, hi = float(n.min()), float(n.max())
    unit = (n - lo) / (hi - lo) if hi > lo else np.zeros_like(n)
    if params.cloud_fraction >= 1:
        threshold = -1e-3
    else:
        threshold = float(np.quantile(unit, 1 - params.cloud_fraction))
    return lo, hi, threshold


def _layer(domain: GridDomain, params: SceneParams, stats: tuple[float, float, float]) -> DensityGrid:
    lo, hi, threshold = stats
    xs, ys, zs = domain.axes()
    n = gradient_noise(xs[:, None], ys[None, :], params.noise_scale, params.seed)
    n = np.clip((n - lo) / (hi - lo), 0.0, 1.0) if hi > lo else np.zeros_like(n)
    cover = np.where(n > threshold, (n - threshold) / (1 - threshold), 0.0)
    profile = vertical_profile(zs, params.base_altitude, params.cloud_height)
    return DensityGrid(domain, params.optical_density * cover[:, :, None] * profile[None, None, :])


def generate_cloud_field(domain: GridDomain, params: SceneParams) -> DensityGrid:
    """Single cumulus layer whose horizontal coverage fraction is ``params.cloud_fraction``."""
    params.validate(domain)
    if params.cloud_fraction == 0:
        return DensityGrid.zeros(domain)
    return _layer(domain, params, _layer_stats(domain, params))


def add_edge_band(grid: DensityGrid, params: SceneParams, edge: str = "north", width: float = 1500.0,
                  margin: float = 250.0) -> DensityGrid:
    """Overlay a cloud band running along one horizontal edge of the domain.

    The band is built from the same noise/profile recipe restricted to a strip
    of ``width`` meters that ends ``margin`` meters inside the edge.
    """
    domain = grid.domain
    params.validate(domain)
    xs, ys, zs = domain.axes()
    lo, hi = np.asarray(domain.origin), domain.upper
    coord = {"north": ys[None, :] - (hi[1] - margin - width),
             "south": (lo[1] + margin + width) - ys[None, :],
             "east": xs[:, None] - (hi[0] - margin - width),
             "west": (lo[0] + margin + width) - xs[:, None]}
    if edge not in coord:
        raise ConfigError(f"unknown edge {edge!r}")
    s = np.broadcast_to(coord[edge], (len(xs), len(ys))) / width
    strip = np.clip(np.minimum(s, 1 - s) * 4, 0.0, 1.0) * ((s > 0) & (s < 1))
    n = gradient_noise(xs[:, None], ys[None, :], params.noise_scale, params.seed + 7919)
    n = (n - n.min()) / (n.max() - n.min()) if n.max() > n.min() else np.zeros_like(n)
    cover = strip * (0.5 + 0.5 * n)
    profile = vertical_profile(zs, params.base_altitude, params.cloud_height)
    band = params.optical_density * cover[:, :, None] * profile[None, None, :]
    return DensityGrid(domain, np.maximum(grid.data, band))


def _shifted_fields(domain: GridDomain, params: SceneParams, wind: tuple[float, float],
                    offsets: list[float]) -> list[DensityGrid]:
    """The layer of ``domain`` translated by ``wind * dt`` for every ``dt`` in ``offsets``.

    The layer is synthesized on a horizontally padded copy of the domain
    (normalized with the statistics of the unpadded one), so cloud carried in
    across the upwind boundary is real cloud rather than empty space, and the
    result does not depend on how far the padding reaches.
    """
    params.validate(domain)
    u, v = float(wind[0]), float(wind[1])
    if not (math.isfinite(u) and math.isfinite(v)):
        raise ConfigError("wind components must be finite")
    if params.cloud_fraction == 0:
        return [DensityGrid.zeros(domain) for _ in offsets]
    reach = max((abs(dt) for dt in offsets), default=0.0)
    vs = domain.voxel_size
    px = int(math.ceil(abs(u) * reach / vs)) + 1
    py = int(math.ceil(abs(v) * reach / vs)) + 1
    nx, ny, nz = domain.dims
    o = domain.origin
    big = GridDomain((o[0] - px * vs, o[1] - py * vs, o[2]), vs, (nx + 2 * px, ny + 2 * py, nz))
    source = _layer(big, params, _layer_stats(domain, params))
    return [DensityGrid(domain, advect(source, u, v, dt).data[px:px + nx, py:py + ny]) for dt in offsets]


def generate_sequence(domain: GridDomain, params: SceneParams, wind: tuple[float, float], T: int,
                      frame_interval: float = 5.0, noise_std: float = 0.0,
                      base: DensityGrid | None = None) -> tuple[list[DensityGrid], tuple[float, float]]:
    """Frames of a layer translating at ``wind`` (m/s); the frame at the center time is the base field.

    Without ``base`` the layer enters from outside the domain (see
    ``field_at``); an explicit ``base`` is translated as is, with empty
    space flowing in.
    """
    if T < 1:
        raise ConfigError("T must be >= 1")
    u, v = float(wind[0]), float(wind[1])
    tc = center_time(T)
    offsets = [(i - tc) * frame_interval for i in range(T)]
    if base is None:
        frames = _shifted_fields(domain, params, (u, v), offsets)
    else:
        frames = [advect(base, u, v, dt) for dt in offsets]
    if noise_std > 0:
        rng = np.random.default_rng([params.seed, 104729])
        frames = [DensityGrid(domain, np.maximum(f.data + rng.normal(0.0, noise_std, size=domain.dims), 0.0))
                  for f in frames]
    return frames, (u, v)


def field_at(domain: GridDomain, params: SceneParams, wind: tuple[float, float], t: float) -> DensityGrid:
    """Noiseless layer translated for ``t`` seconds; ``t = 0`` is ``generate_cloud_field``.

    Frame ``i`` of ``generate_sequence`` equals ``field_at`` with
    ``t = (i - t_c) * frame_interval``.
    """
    return _shifted_fields(domain, params, wind, [float(t)])[0]


def ray_box_interval(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray,
                     hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Parametric entry/exit of rays ``origin + t * dirs`` (t >= 0) through an axis-aligned box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origin) * inv
        tb = (hi - origin) * inv
    tmin = np.fmin(ta, tb)
    tmax = np.fmax(ta, tb)
    # axis-parallel rays: unconstrained if inside the slab, empty otherwise
    parallel = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t0 = np.maximum(tmin.max(axis=-1), 0.0)
    t1 = tmax.min(axis=-1)
    return t0, t1


def camera_rays(grid: DensityGrid, cam: CameraModel):
    rays = cam.pixel_rays().reshape(-1, 3)
    norm = np.linalg.norm(rays, axis=-1)
    dirs = np.ascontiguousarray(rays / norm[:, None])
    center = cam.center
    t0, t1 = ray_box_interval(center, dirs, np.asarray(grid.domain.origin), grid.domain.upper)
    return dirs, norm, center, t0, t1


def render_depth(grid: DensityGrid, cam: CameraModel, surface_threshold: float = SURFACE_DENSITY,
                 step: float = 25.0, conservative: bool = True) -> DepthMap:
    """Z-depth of the first threshold crossing along each pixel ray (``+inf`` = sky).

    With ``conservative`` the result is also capped by a z-buffer of lattice
    nodes whose density reaches the threshold, so every such node lies at or
    behind the depth of the pixel it projects to.
    """
    if not (surface_threshold > 0 and step > 0):
        raise ConfigError("surface_threshold and step must be > 0")
    dirs, norm, center, t0, t1 = camera_rays(grid, cam)
    d = grid.domain
    t_hit = _kernels.march_first_crossing(grid.data, np.asarray(d.origin), d.voxel_size, center,
                                          dirs, t0, t1, float(step), float(surface_threshold))
    depth = (t_hit / norm).reshape(cam.height, cam.width)
    if conservative:
        idx = np.flatnonzero(grid.data.reshape(-1) >= surface_threshold)
        if idx.size:
            ix, iy, iz = np.unravel_index(idx, d.dims)
            pts = np.asarray(d.origin) + np.stack([ix, iy, iz], axis=-1) * d.voxel_size
            row, col, z, observed = pixel_lookup(cam, pts)
            flat = depth.reshape(-1)
            np.minimum.at(flat, row[observed] * cam.width + col[observed], z[observed])
            depth = flat.reshape(cam.height, cam.width)
    return DepthMap(depth)


def corrupt_depth(d: DepthMap, noise: DepthNoise, seed: int, min_depth: float = 25.0) -> DepthMap:
    """Gaussian error, optional quantization and dropout to sky on finite pixels."""
    data = d.data.astype(np.float64)
    finite = np.isfinite(data)
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal(data.shape)
    drop = rng.random(data.shape)
    if noise.gaussian_std == 0 and noise.dropout_prob == 0 and noise.quantization == 0:
        return d
    out = data.copy()
    out[finite] += noise.gaussian_std * gauss[finite]
    if noise.quantization > 0:
        out[finite] = np.round(out[finite] / noise.quantization) * noise.quantization
    out[finite] = np.maximum(out[finite], max(min_depth, noise.quantization))
    out[finite & (drop < noise.dropout_prob)] = np.inf
    return DepthMap(out)


def render_silhouette(d: DepthMap, threshold: float = 20000.0) -> np.ndarray:
    if not threshold > 0:
        raise ConfigError("threshold must be > 0")
    return (d.data < threshold).astype(np.uint8)
