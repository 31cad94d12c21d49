"""Command line entry point: ``cloudcarve <subcommand> [options]``.

Stage subcommands read and write the run directory layout documented in
``cloudcarve.pipeline``. Without ``--config`` a stage reuses the
``config.json`` that an earlier stage left in the run directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .advection import WindProfile, wind_objective
from .evaluation import evaluate, render_opacity, save_png, segment
from .exceptions import CloudCarveError, ConfigError
from .validation import check_thread_count
from .volume import CarvingGrid, read_volume, write_volume

log = logging.getLogger("cloudcarve")


def _set_threads(n) -> None:
    n = check_thread_count(n)
    if not n:
        return
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _resolve_config(args) -> pl.PipelineConfig:
    out = Path(args.out) if args.out else None
    if args.config:
        cfg = pl.PipelineConfig.load(args.config)
    elif out is not None and (out / "config.json").is_file():
        cfg = pl.PipelineConfig.load(out / "config.json")
    else:
        cfg = pl.PipelineConfig()
    return cfg.override(seed=args.seed, out=args.out)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_synth(args, cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    pl.write_json(cfg.to_dict(), out / "config.json")
    frames, _, rig, _ = pl.stage_synth(cfg, out, args.frames)
    log.info("wrote %d frames and %d depth maps per frame to %s", len(frames), len(rig.pairs), out)


_CARVE_DIRS = {"depth": "coarse", "silhouette": "silhouette", "tsdf": "tsdf"}


def cmd_carve(args, cfg):
    out = Path(cfg.out)
    rig, depths = pl.load_views(out)
    target = out / _CARVE_DIRS[args.method]
    target.mkdir(parents=True, exist_ok=True)
    for i, views in enumerate(depths):
        write_volume(pl.carve_frame(cfg, rig, views, args.method), target / f"frame_{i:03d}.vol")
    log.info("carved %d frames into %s", len(depths), target)


def _frames_arg(args, cfg):
    return pl.load_frames(args.frames_dir or Path(cfg.out) / "coarse")


def cmd_advect(args, cfg):
    wind = pl.stage_advect(cfg, Path(cfg.out), _frames_arg(args, cfg))
    _emit(wind.to_dict())


def cmd_integrate(args, cfg):
    out = Path(cfg.out)
    frames = _frames_arg(args, cfg)
    if args.wind is not None:
        u, v = args.wind
        dens = [pl.as_density(f, cfg.fill_value) for f in frames]
        wind = WindProfile(u, v, wind_objective(dens, u, v, cfg.sequence), 1)
    else:
        wind = pl.load_wind(out / "wind.json")
    pl.stage_integrate(cfg, out, frames, wind)
    log.info("wrote %s", out / "integrated.vol")
    _emit({**wind.to_dict(), "window": len(frames), "frame_interval": cfg.sequence.frame_interval})


def cmd_eval(args, cfg):
    out = Path(cfg.out)
    rig = pl.read_rig(args.cameras or out / "cameras.json")
    if rig.central is None:
        raise ConfigError("camera file has no central evaluation camera")
    gt = read_volume(args.gt or out / "gt_center.vol")
    pred = read_volume(args.pred or out / "integrated.vol")
    if isinstance(pred, CarvingGrid):
        pred = pl.carving_to_density(pred, cfg.fill_value)
    if isinstance(gt, CarvingGrid):
        raise ConfigError("ground truth must be a density volume")
    e = cfg.eval
    report = evaluate(gt, pred, rig.central, e.opacity_threshold, e.depth_threshold, e.render_step, e.split_lambda)
    pl.write_json(report.to_dict(), out / "eval.json")
    if args.png:
        png = Path(args.png)
        png.mkdir(parents=True, exist_ok=True)
        for name, grid in (("gt", gt), ("pred", pred)):
            om = render_opacity(grid, rig.central, e.render_step)
            save_png(om.opacity, png / f"{name}_opacity.png")
            save_png(segment(om, e.opacity_threshold, e.depth_threshold), png / f"{name}_mask.png")
    _emit(report.to_dict())


def cmd_pipeline(args, cfg):
    metrics = pl.run_pipeline(cfg)
    _emit({k: {kk: vv for kk, vv in v.items() if kk != "per_frame"} for k, v in metrics.items()})


def _fmt(x, spec=".2f"):
    return "-" if x is None else format(x, spec)


def cmd_ablate(args, cfg):
    rows = pl.compare_strategies(cfg, args.windows, args.strategies, out=cfg.out)
    print(f"{'strategy':<11} {'window':>6} {'jaccard':>8} {'coverage':>9} {'split_l1':>9}")
    for r in rows:
        window = "none" if r["window"] == 0 else str(r["window"])
        print(f"{r['strategy']:<11} {window:>6} {_fmt(r['jaccard']):>8} {_fmt(r['coverage_error']):>9} "
              f"{_fmt(r['split_l1'], '.5f'):>9}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="global seed (scene, rig and depth noise)")
    common.add_argument("--out", help="run directory")
    common.add_argument("--threads", type=int, help="worker threads for compiled kernels; never changes results")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cloudcarve", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="synthesize a sequence, rig and depth maps")
    s.add_argument("--frames", type=int, help="sequence length (default: the advection window)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("carve", parents=[common], help="carve every frame from its depth maps")
    s.add_argument("--method", choices=sorted(_CARVE_DIRS), default="depth")
    s.set_defaults(func=cmd_carve)

    s = sub.add_parser("advect", parents=[common], help="fit the wind to a frame sequence")
    s.add_argument("--frames-dir", help="directory of frame_*.vol (default: <out>/coarse)")
    s.set_defaults(func=cmd_advect)

    s = sub.add_parser("integrate", parents=[common], help="average frames advected to the center time")
    s.add_argument("--frames-dir", help="directory of frame_*.vol (default: <out>/coarse)")
    s.add_argument("--wind", type=float, nargs=2, metavar=("U", "V"), help="wind in m/s (default: <out>/wind.json)")
    s.set_defaults(func=cmd_integrate)

    s = sub.add_parser("eval", parents=[common], help="score a volume against ground truth from the central view")
    s.add_argument("--gt", help="ground-truth volume (default: <out>/gt_center.vol)")
    s.add_argument("--pred", help="predicted volume (default: <out>/integrated.vol)")
    s.add_argument("--cameras", help="camera file (default: <out>/cameras.json)")
    s.add_argument("--png", metavar="DIR", help="also write opacity maps and masks as PNG")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", parents=[common], help="run every stage and write a manifest")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("ablate", parents=[common], help="carving strategies x advection windows")
    s.add_argument("--windows", type=int, nargs="+", default=list(pl.ABLATION_WINDOWS))
    s.add_argument("--strategies", nargs="+", choices=pl.STRATEGIES, default=list(pl.STRATEGIES))
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        _set_threads(args.threads)
        cfg = _resolve_config(args)
        args.func(args, cfg)
    except CloudCarveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
