"""Pinhole cameras, depth maps, signed view distance and the stereo-rig factory.

Camera frame convention: +z forward, +x right, +y down. Poses are stored
world-to-camera, ``x_cam = R @ x_world + t``. Pixel ``(col, row)`` has its
center at ``uv = (col, row)``; lookups use the nearest pixel.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DomainError, VolumeFormatError

__all__ = [
    "CameraModel",
    "DepthMap",
    "StereoRig",
    "project",
    "backproject",
    "signed_view_distance",
    "pixel_lookup",
    "look_at",
    "camera_from_fov",
    "make_paper_rig",
    "read_rig",
    "write_rig",
    "read_depth_map",
    "write_depth_map",
]

CAMERA_CONVENTION = "world_to_camera: x_cam = R @ x_world + t; camera axes +x right, +y down, +z forward"
DEPTH_MAGIC = b"DMAP"
_DMAP_HEADER = struct.Struct("<4s2I")


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ConfigError("image size must be at least 1x1")
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ConfigError("rotation must be orthonormal with determinant +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def horizontal_fov(self) -> float:
        """Full horizontal field of view in degrees (pixel edges)."""
        return math.degrees(2 * math.atan(self.width / 2 / self.fx))

    def to_camera(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.rotation.T + self.translation

    def pixel_rays(self) -> np.ndarray:
        """World-frame ray directions through every pixel center, scaled so the
        camera-frame z component is 1. Shape ``(height, width, 3)``."""
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d_cam @ self.rotation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            return cls(
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                width=int(d["width"]),
                height=int(d["height"]),
                rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.asarray(d["translation"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed camera entry: {exc}") from exc


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel z-depth (m), shape ``(height, width)``; ``+inf`` marks sky."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 2:
            raise ConfigError(f"depth map must be 2-D, got shape {arr.shape}")
        finite = np.isfinite(arr)
        if np.any(np.isnan(arr)) or np.any(np.isneginf(arr)) or np.any(arr[finite] <= 0):
            raise DomainError("depth map values must be > 0 or +inf")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def sky(cls, width: int, height: int) -> "DepthMap":
        return cls(np.full((height, width), np.inf, dtype=np.float32))


@dataclass(frozen=True, eq=False)
class StereoRig:
    pairs: tuple[tuple[CameraModel, CameraModel], ...]
    central: CameraModel | None = None

    def __post_init__(self):
        pairs = tuple((left, right) for left, right in self.pairs)
        for left, right in pairs:
            if np.linalg.norm(left.center - right.center) <= 0:
                raise ConfigError("stereo pair has zero baseline")
        object.__setattr__(self, "pairs", pairs)

    @property
    def baselines(self) -> list[float]:
        return [float(np.linalg.norm(a.center - b.center)) for a, b in self.pairs]

    @property
    def pair_centers(self) -> np.ndarray:
        return np.array([(a.center + b.center) / 2 for a, b in self.pairs])

    @property
    def reference_cameras(self) -> list[CameraModel]:
        """One depth map per pair is rendered from the left camera."""
        return [left for left, _ in self.pairs]


def project(cam: CameraModel, p) -> tuple[np.ndarray, np.ndarray]:
    """Project world point(s) to pixel coordinates and z-depth.

    Points at or behind the camera plane (z <= 0) are marked by NaN in both
    ``uv`` and ``z``.
    """
    pc = cam.to_camera(p)
    z = pc[..., 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[..., 0] / z + cam.cx
        v = cam.fy * pc[..., 1] / z + cam.cy
    uv = np.stack([u, v], axis=-1)
    uv = np.where(front[..., None], uv, np.nan)
    z = np.where(front, z, np.nan)
    return uv, z


def backproject(cam: CameraModel, uv, z_depth) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(z_depth, dtype=np.float64)
    if np.any(~(z > 0)):
        raise DomainError("backprojection depth must be > 0")
    x = (uv[..., 0] - cam.cx) / cam.fx * z
    y = (uv[..., 1] - cam.cy) / cam.fy * z
    pc = np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)
    return (pc - cam.translation) @ cam.rotation


def pixel_lookup(cam: CameraModel, p) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-pixel indices for world point(s).

    Returns ``(row, col, z, observed)``; ``observed`` is False for points
    behind the camera or projecting outside the image, where row/col are 0.
    """
    uv, z = project(cam, p)
    with np.errstate(invalid="ignore"):
        col = np.floor(uv[..., 0] + 0.5)
        row = np.floor(uv[..., 1] + 0.5)
        observed = (col >= 0) & (col <= cam.width - 1) & (row >= 0) & (row <= cam.height - 1)
    col = np.where(observed, col, 0).astype(np.intp)
    row = np.where(observed, row, 0).astype(np.intp)
    return row, col, z, observed


def signed_view_distance(cam: CameraModel, depth: DepthMap, p) -> np.ndarray | float:
    """``z(p) - D(uv)``: negative in front of the observed surface.

    NaN marks "no information" (behind the camera or outside the image).
    Sky pixels give ``-inf``.
    """
    if (depth.width, depth.height) != (cam.width, cam.height):
        raise ConfigError("depth map size does not match camera resolution")
    scalar = np.ndim(p) == 1
    row, col, z, observed = pixel_lookup(cam, np.atleast_2d(p))
    surface = depth.data[row, col].astype(np.float64)
    with np.errstate(invalid="ignore"):
        d = np.where(observed, z - surface, np.nan)
    return float(d[0]) if scalar else d


def look_at(position, target, width: int, height: int, fx: float, fy: float | None = None,
            up=(0.0, 0.0, 1.0)) -> CameraModel:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-12:
        # looking along the up vector: pick east as image right
        right = np.array([1.0, 0.0, 0.0]) - forward * forward[0]
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraModel(
        fx=fx, fy=fx if fy is None else fy,
        cx=(width - 1) / 2, cy=(height - 1) / 2,
        width=width, height=height,
        rotation=R, translation=-R @ position,
    )


def camera_from_fov(position, target, width: int, height: int, hfov_deg: float) -> CameraModel:
    """Square-pixel camera whose full horizontal field of view is ``hfov_deg``."""
    fx = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
    return look_at(position, target, width, height, fx)


def _triangle(sides: np.ndarray) -> np.ndarray:
    # vertices P0, P1, P2 with |P0P1| = c, |P0P2| = b, |P1P2| = a
    a, b, c = sides
    x = (b * b + c * c - a * a) / (2 * c)
    y = math.sqrt(max(b * b - x * x, 0.0))
    return np.array([[0.0, 0.0], [c, 0.0], [x, y]])


def make_paper_rig(
    seed: int = 0,
    center=(0.0, 0.0),
    ground: float = 0.0,
    aim_altitude: float = 2000.0,
    width: int = 128,
    height: int = 96,
    hfov_deg: float = 90.0,
    central_size: int = 128,
    central_fov_deg: float = 120.0,
) -> StereoRig:
    """Three inward-looking stereo pairs on a ground-level triangle plus an upward central camera.

    Pair separations are drawn from [5000, 8000] m and baselines from
    [190, 350] m. Both cameras of a pair share an orientation aimed at the
    triangle centroid at ``aim_altitude``.
    """
    rng = np.random.default_rng(seed)
    sides = rng.uniform(5000.0, 8000.0, size=3)
    baselines = rng.uniform(190.0, 350.0, size=3)
    spin = rng.uniform(0.0, 2 * math.pi)

    verts = _triangle(sides)
    verts -= verts.mean(axis=0)
    rot = np.array([[math.cos(spin), -math.sin(spin)], [math.sin(spin), math.cos(spin)]])
    verts = verts @ rot.T + np.asarray(center, dtype=np.float64)

    target = np.array([center[0], center[1], aim_altitude])
    pairs = []
    for (x, y), b in zip(verts, baselines):
        mid = np.array([x, y, ground])
        ref = camera_from_fov(mid, target, width, height, hfov_deg)
        right_axis = ref.rotation[0]
        left = camera_from_fov(mid - right_axis * b / 2, target - right_axis * b / 2, width, height, hfov_deg)
        right = camera_from_fov(mid + right_axis * b / 2, target + right_axis * b / 2, width, height, hfov_deg)
        pairs.append((left, right))

    overhead = np.array([center[0], center[1], ground])
    central = camera_from_fov(overhead, overhead + [0.0, 0.0, 1.0], central_size, central_size, central_fov_deg)
    return StereoRig(tuple(pairs), central)


def write_rig(rig: StereoRig, path: str | PathLike) -> None:
    cameras = {}
    pairs = []
    for i, (left, right) in enumerate(rig.pairs):
        cameras[f"pair{i}_left"] = left.to_dict()
        cameras[f"pair{i}_right"] = right.to_dict()
        pairs.append([f"pair{i}_left", f"pair{i}_right"])
    doc = {"convention": CAMERA_CONVENTION, "cameras": cameras, "pairs": pairs}
    if rig.central is not None:
        cameras["central"] = rig.central.to_dict()
        doc["central"] = "central"
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_rig(path: str | PathLike) -> StereoRig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"camera file {path} is not valid JSON: {exc}") from exc
    if doc.get("convention") != CAMERA_CONVENTION:
        raise ConfigError(f"camera file {path} does not declare the world-to-camera convention")
    try:
        cams = {name: CameraModel.from_dict(d) for name, d in doc["cameras"].items()}
        pairs = tuple((cams[i], cams[j]) for i, j in doc["pairs"])
        central = cams[doc["central"]] if doc.get("central") else None
    except KeyError as exc:
        raise ConfigError(f"camera file {path} references unknown camera {exc}") from exc
    return StereoRig(pairs, central)


def write_depth_map(depth: DepthMap, path: str | PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(_DMAP_HEADER.pack(DEPTH_MAGIC, depth.width, depth.height))
        fh.write(depth.data.astype("<f4").tobytes(order="C"))


def read_depth_map(path: str | PathLike) -> DepthMap:
    buf = Path(path).read_bytes()
    if buf[:4] != DEPTH_MAGIC:
        raise VolumeFormatError(f"bad depth-map magic {buf[:4]!r}", 0)
    if len(buf) < _DMAP_HEADER.size:
        raise VolumeFormatError("truncated depth-map header", len(buf))
    _, w, h = _DMAP_HEADER.unpack_from(buf)
    if w < 1 or h < 1:
        raise VolumeFormatError("depth map has zero size", 4 if w < 1 else 8)
    expected = _DMAP_HEADER.size + 4 * w * h
    if len(buf) != expected:
        raise VolumeFormatError(f"depth-map payload size mismatch, expected {expected} bytes",
                                min(len(buf), expected))
    data = np.frombuffer(buf, dtype="<f4", offset=_DMAP_HEADER.size).reshape(h, w)
    bad = np.isnan(data) | np.isneginf(data) | (data <= 0)
    if bad.any():
        raise VolumeFormatError("invalid depth value", _DMAP_HEADER.size + 4 * int(np.argmax(bad.ravel())))
    return DepthMap(data)
