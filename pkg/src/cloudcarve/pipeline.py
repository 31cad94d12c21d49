"""End-to-end runs: synthesis, depth rendering, carving, wind fit, integration, evaluation.

Every stage persists its outputs below the run directory so later stages
can be re-run from disk (this is what the individual CLI subcommands do):

    cameras.json                     rig (left cameras render the depth maps)
    gt/frame_NNN.vol                 ground-truth density per frame
    gt_center.vol                    ground truth at the sequence center time
    scene.json                       scene parameters, true wind and seeds
    depth/frame_NNN_view_K.dmap      (noisy) depth map per frame and pair
    coarse/frame_NNN.vol             depth carving per frame
    silhouette/frame_NNN.vol         silhouette carving per frame
    wind.json                        fitted wind
    integrated.vol                   advected mean of the coarse densities
    metrics.json                     scores of the three reconstructions
    config.json                      fully resolved configuration
    manifest.json                    provenance, stage status, sha256 of every file
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .advection import SequenceConfig, WindProfile, center_time, fit_wind, integrate
from .camera import StereoRig, make_paper_rig, read_depth_map, read_rig, write_depth_map, write_rig
from .carving import (
    CarveConfig,
    carving_to_density,
    depth_carve,
    silhouette_carve,
    tsdf_fuse,
    tsdf_to_carving,
)
from .evaluation import MetricsReport, evaluate
from .exceptions import CloudCarveError, ConfigError, PipelineError
from .synthetic import (
    DepthNoise,
    SceneParams,
    corrupt_depth,
    field_at,
    generate_sequence,
    render_depth,
    render_silhouette,
)
from .volume import CarvingGrid, DensityGrid, GridDomain, read_volume, write_volume

__all__ = [
    "EvalConfig",
    "PipelineConfig",
    "run_pipeline",
    "compare_strategies",
    "stage_synth",
    "stage_carve",
    "stage_advect",
    "stage_integrate",
    "stage_eval",
    "load_frames",
    "load_views",
    "load_wind",
    "write_json",
    "as_density",
]

STRATEGIES = ("silhouette", "tsdf", "depth")
ABLATION_WINDOWS = (5, 20, 40)


@dataclass(frozen=True)
class EvalConfig:
    opacity_threshold: float = 0.15
    depth_threshold: float = 4000.0
    silhouette_threshold: float = 20000.0
    split_lambda: float = 1.0
    render_step: float = 25.0

    def __post_init__(self):
        if not 0 <= self.opacity_threshold <= 1:
            raise ConfigError("opacity_threshold must lie in [0, 1]")
        if not (self.depth_threshold > 0 and self.silhouette_threshold > 0 and self.render_step > 0):
            raise ConfigError("depth thresholds and render_step must be > 0")
        if not 0 <= self.split_lambda <= 1:
            raise ConfigError("split_lambda must lie in [0, 1]")


# Values stated by the source study; everything else is an engineering default.
PAPER_KEYS = frozenset({
    "domain.origin", "domain.voxel_size", "domain.dims",
    "carve.epsilon",
    "sequence.frame_interval", "sequence.window",
    "eval.opacity_threshold", "eval.depth_threshold", "eval.silhouette_threshold", "eval.split_lambda",
    "rig.baseline_range", "rig.separation_range", "rig.central_fov_deg",
})


@dataclass(frozen=True)
class PipelineConfig:
    domain: GridDomain = field(default_factory=GridDomain)
    carve: CarveConfig = field(default_factory=CarveConfig)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    noise: DepthNoise = field(default_factory=DepthNoise)
    scene: SceneParams = field(default_factory=SceneParams)
    eval: EvalConfig = field(default_factory=EvalConfig)
    # ground-truth wind of the synthetic sequence (m/s)
    wind: tuple[float, float] = (6.0, -3.0)
    fill_value: float = 0.04
    tsdf_truncation: float = 1000.0
    image_width: int = 128
    image_height: int = 96
    pair_fov_deg: float = 90.0
    out: str = "run"
    seed: int = 0
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        wind = tuple(float(w) for w in self.wind)
        if len(wind) != 2 or not all(math.isfinite(w) for w in wind):
            raise ConfigError(f"wind must be two finite numbers, got {self.wind}")
        object.__setattr__(self, "wind", wind)
        if not self.fill_value >= 0:
            raise ConfigError("fill_value must be >= 0")
        if not self.tsdf_truncation > 0:
            raise ConfigError("tsdf_truncation must be > 0")
        if int(self.image_width) < 1 or int(self.image_height) < 1:
            raise ConfigError("image size must be positive")
        if not 0 < self.pair_fov_deg < 180:
            raise ConfigError("pair_fov_deg must lie in (0, 180)")
        if isinstance(self.seed, bool) or int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed))
        # the run seed drives every random draw, scene noise included
        object.__setattr__(self, "scene", dataclasses.replace(self.scene, seed=self.seed))
        self.scene.validate(self.domain)
        if not self.provenance:
            object.__setattr__(self, "provenance", default_provenance())

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        """Everything that determines results; the output location is left out."""
        return {
            "domain": self.domain.to_dict(),
            "carve": dataclasses.asdict(self.carve),
            "sequence": dataclasses.asdict(self.sequence),
            "noise": self.noise.to_dict(),
            "scene": self.scene.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "wind": list(self.wind),
            "fill_value": self.fill_value,
            "tsdf_truncation": self.tsdf_truncation,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "pair_fov_deg": self.pair_fov_deg,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Overlay ``doc`` on ``base`` (defaults if omitted); overridden keys get provenance ``user``."""
        base = base or cls()
        merged = {**base.to_dict(), "out": base.out}
        provenance = dict(base.provenance)
        for key, value in doc.items():
            if key == "provenance":
                continue
            if key not in merged:
                raise ConfigError(f"unknown configuration key {key!r}")
            if isinstance(merged[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"configuration section {key!r} must be an object")
                for sub, v in value.items():
                    if sub not in merged[key]:
                        raise ConfigError(f"unknown configuration key {key}.{sub!r}")
                    merged[key][sub] = v
                    provenance[f"{key}.{sub}"] = "user"
            else:
                merged[key] = value
                provenance[key] = "user"
        try:
            return cls(
                domain=GridDomain.from_dict(merged["domain"]),
                carve=CarveConfig(**merged["carve"]),
                sequence=SequenceConfig(**merged["sequence"]),
                noise=DepthNoise(**merged["noise"]),
                scene=SceneParams(**merged["scene"]),
                eval=EvalConfig(**merged["eval"]),
                wind=tuple(merged["wind"]),
                fill_value=float(merged["fill_value"]),
                tsdf_truncation=float(merged["tsdf_truncation"]),
                image_width=int(merged["image_width"]),
                image_height=int(merged["image_height"]),
                pair_fov_deg=float(merged["pair_fov_deg"]),
                out=str(merged["out"]),
                seed=merged["seed"],
                provenance=provenance,
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(doc)

    def override(self, **values) -> "PipelineConfig":
        """Top-level overrides (e.g. from CLI flags); ``None`` values are ignored."""
        return PipelineConfig.from_dict({k: v for k, v in values.items() if v is not None}, base=self)

    @property
    def scene_params(self) -> SceneParams:
        return self.scene

    def make_rig(self) -> StereoRig:
        d = self.domain
        cx = d.origin[0] + (d.dims[0] - 1) * d.voxel_size / 2
        cy = d.origin[1] + (d.dims[1] - 1) * d.voxel_size / 2
        return make_paper_rig(self.seed, center=(cx, cy), width=self.image_width, height=self.image_height,
                              hfov_deg=self.pair_fov_deg)


def _flat_keys(doc: dict, prefix: str = "") -> list[str]:
    keys = []
    for k, v in doc.items():
        if isinstance(v, dict):
            keys += _flat_keys(v, f"{prefix}{k}.")
        else:
            keys.append(prefix + k)
    return keys


def _default_doc() -> dict:
    doc = {}
    for f in dataclasses.fields(PipelineConfig):
        if f.name in ("provenance", "out"):
            continue
        value = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if isinstance(value, GridDomain):
            value = value.to_dict()
        elif dataclasses.is_dataclass(value):
            value = dataclasses.asdict(value)
        doc[f.name] = value
    return doc


def default_provenance() -> dict:
    """``paper`` or ``design`` for every configuration key, plus the fixed rig facts."""
    prov = {k: ("paper" if k in PAPER_KEYS else "design") for k in _flat_keys(_default_doc())}
    for k in ("rig.baseline_range", "rig.separation_range", "rig.central_fov_deg"):
        prov[k] = "paper"
    return prov


# file helpers ------------------------------------------------------------

def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _frame_name(i: int) -> str:
    return f"frame_{i:03d}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_frames(directory) -> list[DensityGrid | CarvingGrid]:
    paths = sorted(Path(directory).glob("frame_*.vol"))
    if not paths:
        raise ConfigError(f"no frame_*.vol files in {directory}")
    return [read_volume(p) for p in paths]


def load_views(run_dir) -> tuple[StereoRig, list[list]]:
    """Rig and per-frame depth maps written by ``stage_synth``."""
    run_dir = Path(run_dir)
    rig = read_rig(run_dir / "cameras.json")
    n_views = len(rig.pairs)
    frames = sorted({p.name.split("_view_")[0] for p in (run_dir / "depth").glob("frame_*_view_*.dmap")})
    if not frames:
        raise ConfigError(f"no depth maps in {run_dir / 'depth'}")
    depths = [[read_depth_map(run_dir / "depth" / f"{f}_view_{k}.dmap") for k in range(n_views)] for f in frames]
    return rig, depths


def load_wind(path) -> WindProfile:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return WindProfile(float(doc["u"]), float(doc["v"]), float(doc.get("objective", 0.0)),
                           int(doc.get("evaluations", 0)))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"wind file {path} is malformed: {exc}") from exc


def as_density(grid, fill_value: float) -> DensityGrid:
    """Carvings become fill-value densities; density grids pass through."""
    return carving_to_density(grid, fill_value) if isinstance(grid, CarvingGrid) else grid


# stages ------------------------------------------------------------------

def _render_views(cfg: PipelineConfig, rig: StereoRig, frames: Sequence[DensityGrid], first: int = 0):
    depths = []
    for i, frame in enumerate(frames, start=first):
        views = []
        for k, cam in enumerate(rig.reference_cameras):
            clean = render_depth(frame, cam, step=cfg.eval.render_step)
            views.append(corrupt_depth(clean, cfg.noise, [cfg.seed, i, k]))
        depths.append(views)
    return depths


def stage_synth(cfg: PipelineConfig, out: Path, T: int | None = None):
    """Ground-truth sequence, rig and depth maps; returns ``(frames, center_gt, rig, depths)``."""
    T = T or cfg.sequence.window
    params = cfg.scene_params
    frames, _ = generate_sequence(cfg.domain, params, cfg.wind, T, cfg.sequence.frame_interval)
    center = field_at(cfg.domain, params, cfg.wind, 0.0)
    rig = cfg.make_rig()
    depths = _render_views(cfg, rig, frames)
    for sub in ("gt", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_rig(rig, out / "cameras.json")
    for i, frame in enumerate(frames):
        write_volume(frame, out / "gt" / f"{_frame_name(i)}.vol")
        for k, d in enumerate(depths[i]):
            write_depth_map(d, out / "depth" / f"{_frame_name(i)}_view_{k}.dmap")
    write_volume(center, out / "gt_center.vol")
    write_json({"scene": cfg.scene_params.to_dict(), "wind": list(cfg.wind), "seed": cfg.seed, "frames": T,
                "frame_interval": cfg.sequence.frame_interval, "noise": cfg.noise.to_dict()}, out / "scene.json")
    return frames, center, rig, depths


def carve_frame(cfg: PipelineConfig, rig: StereoRig, views, method: str = "depth") -> CarvingGrid:
    cams = rig.reference_cameras
    if method == "depth":
        return depth_carve(cfg.domain, cams, views, cfg.carve)
    if method == "silhouette":
        masks = [render_silhouette(d, cfg.eval.silhouette_threshold) for d in views]
        return silhouette_carve(cfg.domain, cams, masks)
    if method == "tsdf":
        return tsdf_to_carving(cfg.domain, tsdf_fuse(cfg.domain, cams, views, cfg.tsdf_truncation))
    raise ConfigError(f"unknown carving method {method!r}; expected one of {STRATEGIES}")


def stage_carve(cfg: PipelineConfig, out: Path, rig: StereoRig, depths) -> tuple[list, list]:
    """Depth and silhouette carvings per frame."""
    coarse, silhouettes = [], []
    for sub in ("coarse", "silhouette"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, views in enumerate(depths):
        c = carve_frame(cfg, rig, views, "depth")
        s = carve_frame(cfg, rig, views, "silhouette")
        write_volume(c, out / "coarse" / f"{_frame_name(i)}.vol")
        write_volume(s, out / "silhouette" / f"{_frame_name(i)}.vol")
        coarse.append(c)
        silhouettes.append(s)
    return coarse, silhouettes


def stage_advect(cfg: PipelineConfig, out: Path, coarse) -> WindProfile:
    frames = [as_density(c, cfg.fill_value) for c in coarse]
    wind = fit_wind(frames, cfg.sequence)
    report = {**wind.to_dict(), "window": len(frames), "frame_interval": cfg.sequence.frame_interval}
    write_json(report, out / "wind.json")
    return wind


def stage_integrate(cfg: PipelineConfig, out: Path, coarse, wind: WindProfile) -> DensityGrid:
    frames = [as_density(c, cfg.fill_value) for c in coarse]
    result = integrate(frames, wind, cfg.sequence)
    write_volume(result, out / "integrated.vol")
    return result


def _score(cfg: PipelineConfig, gt: DensityGrid, pred, rig: StereoRig) -> MetricsReport:
    e = cfg.eval
    return evaluate(gt, as_density(pred, cfg.fill_value), rig.central, e.opacity_threshold, e.depth_threshold,
                    e.render_step, e.split_lambda)


def _mean_report(reports) -> dict:
    mean = MetricsReport.mean(reports).to_dict()
    mean["per_frame"] = [r.to_dict() for r in reports]
    return mean


def stage_eval(cfg: PipelineConfig, out: Path, gt_frames, center_gt, coarse, silhouettes, integrated,
               rig: StereoRig) -> dict:
    if rig.central is None:
        raise ConfigError("evaluation needs a rig with a central camera")
    metrics = {
        "depth_carving": _mean_report([_score(cfg, g, c, rig) for g, c in zip(gt_frames, coarse)]),
        "silhouette_carving": _mean_report([_score(cfg, g, s, rig) for g, s in zip(gt_frames, silhouettes)]),
        "carving_advection": _score(cfg, center_gt, integrated, rig).to_dict(),
    }
    write_json(metrics, out / "metrics.json")
    return metrics


# orchestration -----------------------------------------------------------

def _write_manifest(cfg: PipelineConfig, out: Path, stages: dict, failed: str | None) -> dict:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(out).as_posix()] = _sha256(p)
    digest = hashlib.sha256("".join(f"{k}\n{v}\n" for k, v in files.items()).encode()).hexdigest()
    manifest = {
        "config": cfg.to_dict(),
        "provenance": dict(sorted(cfg.provenance.items())),
        "stages": stages,
        "complete": failed is None,
        "failed_stage": failed,
        "files": files,
        "digest": digest,
    }
    write_json(manifest, out / "manifest.json")
    return manifest


def _run_stages(cfg: PipelineConfig, out: Path, stages: list[tuple[str, Callable]]) -> dict:
    status = {name: "pending" for name, _ in stages}
    results = {}
    for name, fn in stages:
        try:
            results[name] = fn(results)
        except (CloudCarveError, OSError, ValueError, FloatingPointError) as exc:
            status[name] = "failed"
            _write_manifest(cfg, out, status, name)
            raise PipelineError(name, exc) from exc
        status[name] = "done"
    results["manifest"] = _write_manifest(cfg, out, status, None)
    return results


def run_pipeline(cfg: PipelineConfig, out=None) -> dict:
    """Run every stage and return the metrics dict (also written to ``metrics.json``)."""
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.to_dict(), out / "config.json")
    stages = [
        ("synth", lambda r: stage_synth(cfg, out)),
        ("carve", lambda r: stage_carve(cfg, out, r["synth"][2], r["synth"][3])),
        ("advect", lambda r: stage_advect(cfg, out, r["carve"][0])),
        ("integrate", lambda r: stage_integrate(cfg, out, r["carve"][0], r["advect"])),
        ("eval", lambda r: stage_eval(cfg, out, r["synth"][0], r["synth"][1], r["carve"][0], r["carve"][1],
                                      r["integrate"], r["synth"][2])),
    ]
    return _run_stages(cfg, out, stages)["eval"]


def compare_strategies(cfg: PipelineConfig, windows: Sequence[int] = ABLATION_WINDOWS,
                       strategies: Sequence[str] = STRATEGIES, out=None) -> list[dict]:
    """Rows for every carving strategy without advection and with each advection window.

    One synthetic sequence of ``max(windows)`` frames is shared by all rows.
    Windows are centered in it and scored against the ground truth at the
    window's own center time; the no-advection row averages per-frame scores
    over the whole sequence.
    """
    windows = [int(w) for w in windows]
    if not windows or min(windows) < 1:
        raise ConfigError("windows must be positive frame counts")
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
    T = max(windows)
    dt = cfg.sequence.frame_interval
    params = cfg.scene_params
    frames, _ = generate_sequence(cfg.domain, params, cfg.wind, T, dt)
    rig = cfg.make_rig()
    depths = _render_views(cfg, rig, frames)
    tc = center_time(T)

    rows = []
    for strategy in strategies:
        coarse = [as_density(carve_frame(cfg, rig, views, strategy), cfg.fill_value) for views in depths]
        per_frame = MetricsReport.mean([_score(cfg, g, c, rig) for g, c in zip(frames, coarse)])
        rows.append({"strategy": strategy, "window": 0, "wind": None, **per_frame.to_dict()})
        for w in windows:
            start = (T - w) // 2
            subset = coarse[start:start + w]
            seq = dataclasses.replace(cfg.sequence, window=w)
            wind = fit_wind(subset, seq)
            fused = integrate(subset, wind, seq)
            t_center = start + center_time(w)
            gt = field_at(cfg.domain, params, cfg.wind, (t_center - tc) * dt)
            report = _score(cfg, gt, fused, rig)
            rows.append({"strategy": strategy, "window": w, "wind": [wind.u, wind.v], **report.to_dict()})
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_json({"config": cfg.to_dict(), "rows": rows}, out / "ablation.json")
    return rows


def paper_defaults() -> dict:
    """The defaults that must match the source study, keyed by dotted name."""
    cfg = PipelineConfig()
    return {
        "domain.dims": cfg.domain.dims,
        "domain.voxel_size": cfg.domain.voxel_size,
        "carve.epsilon": cfg.carve.epsilon,
        "sequence.window": cfg.sequence.window,
        "sequence.frame_interval": cfg.sequence.frame_interval,
        "eval.opacity_threshold": cfg.eval.opacity_threshold,
        "eval.depth_threshold": cfg.eval.depth_threshold,
        "eval.silhouette_threshold": cfg.eval.silhouette_threshold,
    }
