"""lumos command line: gen-scene, degrade, render, fit, eval, voxel-stats, ablate."""
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence
from pathlib import Path
from pydantic import ValidationError
import numpy as np
import argparse
import logging
import json
import time
import sys

from core import GaussianScene, ImageLinear, image_load, image_save, list_pngs, ply_read, ply_write, read_cameras, tensor_read
from errors import (
    CameraFormatError, ImageDecodeError, ImageFormatError, LumosError, NumericalError,
    PlyFormatError, TensorFormatError, UsageError,
)
from geometry import DepthMap, PointMap, mask_path
from models import (
    DegradeConfig, ExtractorSpec, FitConfig, LumosWeights, ObjectiveWeights, ParamScales,
    RenderOptions, RunManifest, TrainableParams,
)
import degrade
import fit
import metrics
import runlog
import synth
from renderer import render
from voxelfeat import voxel_stats, voxelize

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERICAL = 3

IO_ERRORS = (OSError, TensorFormatError, ImageFormatError, ImageDecodeError, PlyFormatError, CameraFormatError)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports misuse as UsageError instead of exiting with status 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class Run:
    """Inputs and outputs recorded into the run manifest"""

    def __init__(self, command: str, manifest_path: Optional[Path]):
        self.command = command
        self.manifest_path = manifest_path
        self.inputs: Dict[str, Optional[Path]] = {}
        self.outputs: List[str] = []
        self.config: Dict[str, Any] = {}

    def output(self, path) -> Path:
        self.outputs.append(str(path))
        return Path(path)


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------

def _floats(count: int):
    def parse(text: str) -> List[float]:
        try:
            values = [float(v) for v in text.split(",")]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {count} comma-separated numbers, got {text!r}")
        if len(values) != count:
            raise argparse.ArgumentTypeError(f"expected {count} comma-separated numbers, got {text!r}")
        return values
    return parse


def _load_scene(path: Path, f64: bool) -> GaussianScene:
    scene = ply_read(path)
    return scene.astype(np.float64) if f64 else scene


def _load_images(directory: Path, f64: bool) -> List[ImageLinear]:
    paths = list_pngs(directory)
    if not paths:
        raise FileNotFoundError(f"no PNG images in {directory}")
    images = [image_load(p) for p in paths]
    return [ImageLinear(im.pixels.astype(np.float64)) for im in images] if f64 else images


def _render_options(args) -> RenderOptions:
    return RenderOptions(background=tuple(args.bg)) if getattr(args, "bg", None) else RenderOptions()


PARAM_FLAGS = ("center", "opacity", "rotation", "scale", "sh")


def fit_config_from_args(args) -> FitConfig:
    unknown = sorted(set(args.freeze) - set(PARAM_FLAGS))
    if unknown:
        raise UsageError(f"cannot freeze unknown parameter classes {unknown}")
    trainable = TrainableParams(**{name: name not in args.freeze for name in PARAM_FLAGS})
    extractor = ExtractorSpec(kind="external_weights", weight_path=args.extractor_weights) \
        if args.extractor_weights else ExtractorSpec()
    return FitConfig(
        iters=args.iters,
        lr_max=args.lr_max,
        warmup=args.warmup,
        lr_min=args.lr_min,
        lumos=LumosWeights(lambda_c=args.lambda_c, lambda_i=args.lambda_i, lambda_v=args.lambda_v),
        objective=ObjectiveWeights(omega_rec=args.omega_rec, omega_distill=args.omega_distill, omega_lumos=args.omega_lumos),
        trainable=trainable,
        lr_scale=ParamScales(**dict(zip(PARAM_FLAGS, args.lr_scale))),
        rec_kind=args.rec,
        distill_source=args.distill_source,
        voxel_base_size=args.voxel_size,
        depth_valid_alpha=args.depth_valid_alpha,
        views_per_step=args.views_per_step,
        threads=args.threads,
        seed=args.seed,
        render=_render_options(args),
        extractor=extractor,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args, run: Run) -> None:
    bbox = (args.bbox[:3], args.bbox[3:]) if args.bbox else synth.DEFAULT_BBOX
    run.config = {"seed": args.seed, "n": args.n, "views": args.views, "bbox": bbox}
    for path in synth.gen_scene(
        args.seed, args.n, args.out, bbox=bbox, n_views=args.views,
        width=args.width, height=args.height, sh_degree=args.sh_degree,
    ):
        run.output(path)


def cmd_degrade(args, run: Run) -> None:
    base = DegradeConfig.over_exposure(args.seed) if args.mode == "over" else DegradeConfig(seed=args.seed)
    overrides = {
        key: value for key, value in (
            ("exposure_min", args.exposure_min), ("exposure_max", args.exposure_max),
            ("gamma_min", args.gamma_min), ("gamma_max", args.gamma_max),
        ) if value is not None
    }
    config = DegradeConfig(**{**base.model_dump(), **overrides})
    run.inputs["in"] = args.in_dir
    run.config = config.model_dump(mode="json")
    degrade.degrade_dir(args.in_dir, args.out, config)
    run.output(args.out)


def cmd_render(args, run: Run) -> None:
    run.inputs.update(scene=args.scene, cameras=args.cameras)
    scene = _load_scene(args.scene, args.f64)
    views = read_cameras(args.cameras)
    opts = _render_options(args)
    run.config = opts.model_dump(mode="json")
    out_dir = Path(args.out)
    for sub in ("depth", "alpha"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for name, cam in zip(synth.view_names(len(views)), views):
        out = render(scene, cam, opts)
        image_save(out.rgb, run.output(out_dir / f"{name}.png"))
        DepthMap(out.depth).save(run.output(out_dir / "depth" / f"{name}.lumt"))
        image_save(np.repeat(out.alpha[..., None], 3, axis=2), run.output(out_dir / "alpha" / f"{name}.png"))
    logger.info(f"Rendered {len(views)} views to {out_dir}")


def _fit_inputs(args, run: Run):
    run.inputs.update(
        scene=args.scene, cameras=args.cameras, targets=args.targets,
        degraded=args.degraded, teacher_points=args.teacher_points, low_points=args.low_points,
    )
    cfg = fit_config_from_args(args)
    run.config = cfg.model_dump(mode="json")
    scene = _load_scene(args.scene, args.f64)
    if args.reset_colors:
        scene = scene.with_params(sh=np.zeros_like(scene.sh))
    views = read_cameras(args.cameras)
    targets = _load_images(args.targets, args.f64)
    degraded = _load_images(args.degraded, args.f64)
    teacher = PointMap.load(args.teacher_points)
    low = PointMap.load(args.low_points) if args.low_points else None
    return scene, views, targets, degraded, teacher, low, cfg


def cmd_fit(args, run: Run) -> None:
    scene, views, targets, degraded, teacher, low, cfg = _fit_inputs(args, run)
    with runlog.RunLog(args.log) as log:
        if args.log:
            run.output(args.log)
        result = fit.fit_scene(
            scene, views, targets, degraded, teacher, cfg,
            low_points=low, progress=sys.stderr.isatty(), on_report=log.write,
        )
    if any(not r.is_consistent(cfg.lumos, cfg.objective) for r in result.history):
        raise NumericalError("loss report failed its consistency check")
    ply_write(result.scene, run.output(args.out))
    if args.report:
        runlog.write_json_atomic(
            {"baseline": result.baseline, "final": result.final}, run.output(args.report),
        )


def cmd_ablate(args, run: Run) -> None:
    scene, views, targets, degraded, teacher, low, cfg = _fit_inputs(args, run)
    reports = fit.run_ablation(scene, views, targets, degraded, teacher, cfg, low_points=low)
    runlog.write_json_atomic(reports, run.output(args.out))


def cmd_eval(args, run: Run) -> None:
    run.inputs.update(pred=args.pred, gt=args.gt)
    report = metrics.evaluate_dirs(args.pred, args.gt, threads=args.threads)
    if args.out:
        runlog.write_json_atomic(report, run.output(args.out))
    print(runlog.dumps(report.model_dump(mode="json"), indent=2))


def cmd_voxel_stats(args, run: Run) -> None:
    run.inputs.update(points=args.points, feats=args.feats)
    run.config = {"voxel_size": args.voxel_size, "origin": args.origin}
    points = tensor_read(args.points).data
    feats = tensor_read(args.feats).data
    if points.ndim == 2:
        sibling = mask_path(args.points)
        mask = tensor_read(sibling).data.reshape(-1) > 0.5 if sibling.exists() else None
        grid = voxelize(points, feats, args.voxel_size, args.origin, mask=mask)
    else:
        grid = voxelize(PointMap.load(args.points), feats, args.voxel_size, args.origin)
    stats = voxel_stats(grid)
    payload = {"cells": len(grid), "mu": stats.mu, "sigma": stats.sigma}
    if args.out:
        runlog.write_json_atomic(payload, run.output(args.out))
    print(runlog.dumps(payload, indent=2))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_fit_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--targets", type=Path, required=True)
    p.add_argument("--degraded", type=Path, required=True)
    p.add_argument("--teacher-points", type=Path, required=True)
    p.add_argument("--low-points", type=Path)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr-max", type=float, default=2e-4)
    p.add_argument("--lr-min", type=float, default=0.0)
    p.add_argument("--warmup", type=int)
    p.add_argument("--lambda-c", type=float, default=0.1)
    p.add_argument("--lambda-i", type=float, default=1.0)
    p.add_argument("--lambda-v", type=float, default=0.01)
    p.add_argument("--omega-rec", type=float, default=1.0)
    p.add_argument("--omega-distill", type=float, default=1.0)
    p.add_argument("--omega-lumos", type=float, default=1.0)
    p.add_argument("--freeze", type=lambda s: [v for v in s.split(",") if v], default=[],
                   help="comma-separated parameter classes to keep fixed: center,opacity,rotation,scale,sh")
    p.add_argument("--lr-scale", type=_floats(5), default=[1.0] * 5,
                   help="per-class LR multipliers center,opacity,rotation,scale,sh")
    p.add_argument("--rec", choices=["mse", "l1"], default="mse")
    p.add_argument("--distill-source", choices=["gt", "low"], default="gt")
    p.add_argument("--voxel-size", type=float, help="base voxel edge; default is 1/64 of the teacher box diagonal")
    p.add_argument("--depth-valid-alpha", type=float, default=0.5)
    p.add_argument("--views-per-step", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bg", type=_floats(3))
    p.add_argument("--extractor-weights", type=Path)
    p.add_argument("--reset-colors", action="store_true", help="start from gray colors")


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--f64", action="store_true", help="run numerics in 64-bit")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--manifest", type=Path, help="run manifest path (default: beside --out)")

    parser = ArgumentParser(prog="lumos", description="Differentiable splat restoration toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("gen-scene", parents=[common], help="write a synthetic scene, cameras and clean renders")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--views", type=int, default=6)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--sh-degree", type=int, default=1)
    p.add_argument("--bbox", type=_floats(6), help="xmin,ymin,zmin,xmax,ymax,zmax")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_gen_scene, out_kind="dir")

    p = sub.add_parser("degrade", parents=[common], help="darken or over-expose a directory of PNGs")
    p.add_argument("--in", dest="in_dir", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=["low", "over"], default="low")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exposure-min", type=float)
    p.add_argument("--exposure-max", type=float)
    p.add_argument("--gamma-min", type=float)
    p.add_argument("--gamma-max", type=float)
    p.set_defaults(handler=cmd_degrade, out_kind="dir")

    p = sub.add_parser("render", parents=[common], help="render a PLY scene from every camera")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--bg", type=_floats(3))
    p.set_defaults(handler=cmd_render, out_kind="dir")

    p = sub.add_parser("fit", parents=[common], help="optimize a scene against clean targets")
    _add_fit_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--log", type=Path, help="JSON-lines loss log")
    p.add_argument("--report", type=Path, help="baseline/final metrics JSON")
    p.set_defaults(handler=cmd_fit, out_kind="file")

    p = sub.add_parser("ablate", parents=[common], help="rerun fit for each Lumos loss variant")
    _add_fit_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_ablate, out_kind="file")

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(handler=cmd_eval, out_kind="file")

    p = sub.add_parser("voxel-stats", parents=[common], help="channel mean/std of voxel-pooled features")
    p.add_argument("--points", type=Path, required=True)
    p.add_argument("--feats", type=Path, required=True)
    p.add_argument("--voxel-size", type=float, required=True)
    p.add_argument("--origin", type=_floats(3), default=[0.0, 0.0, 0.0])
    p.add_argument("--out", type=Path)
    p.set_defaults(handler=cmd_voxel_stats, out_kind="file")
    return parser


def manifest_path(args) -> Optional[Path]:
    if args.manifest is not None:
        return args.manifest
    out = getattr(args, "out", None)
    if out is None:
        return None
    if args.out_kind == "dir":
        return Path(out) / "manifest.json"
    return Path(out).with_name(Path(out).name + ".manifest.json")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, IO_ERRORS):
        return EXIT_IO
    return EXIT_USAGE


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"lumos: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    run = Run(args.command, manifest_path(args))
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        args.handler(args, run)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        code = EXIT_USAGE
    except (LumosError, OSError) as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed: {e}")
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        code = EXIT_USAGE
    finally:
        if run.manifest_path is not None:
            manifest = RunManifest(
                command=args.command,
                config=json.loads(runlog.dumps(run.config)),
                input_hashes=_safe_hashes(run.inputs),
                outputs=run.outputs,
                started_at=started,
                wall_time=time.perf_counter() - t0,
                exit_code=code,
            )
            try:
                runlog.write_manifest(manifest, run.manifest_path)
            except OSError:
                code = code or EXIT_IO
    return code


def _safe_hashes(inputs: Dict[str, Optional[Path]]) -> Dict[str, str]:
    try:
        return runlog.hash_inputs(inputs)
    except OSError as e:
        logger.warning(f"Could not hash inputs: {e}")
        return {}


if __name__ == "__main__":
    sys.exit(main())
