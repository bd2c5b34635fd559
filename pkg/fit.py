"""Per-scene optimization of a GaussianScene against the full restoration objective."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
from tqdm import tqdm
import numpy as np
import logging
import math

from core import GaussianScene, ImageLinear
from errors import ConfigError, EmptySelectionError, NumericalError, ShapeMismatchError
from features import Extractor, FeaturePyramid, build_extractor, content_loss
from geometry import DepthMap, PointMap, backproject, backproject_backward, distill_loss, downsample_points
from losses import build_report, image_loss, rec_loss
from metrics import evaluate_views
from models import CameraView, FitConfig, LossReport, LumosWeights, MetricReport, PARAM_NAMES
from renderer import RenderOutput, RenderUpstream, SceneGrad, render, render_backward, render_with_tape
from voxelfeat import (
    VoxelGrid, VoxelStats, default_voxel_sizes, voxel_loss, voxel_stats, voxel_stats_backward,
    voxelize, voxelize_backward,
)

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-6


def lr_schedule(step: int, cfg: FitConfig) -> float:
    """Linear warm-up to lr_max, then cosine annealing to lr_min"""
    if not 0 <= step < max(cfg.iters, 1):
        raise ConfigError(f"step {step} outside [0, {cfg.iters})")
    warmup = cfg.effective_warmup
    if step < warmup:
        return cfg.lr_max * (step + 1) / warmup
    if cfg.iters <= warmup:
        return cfg.lr_max
    progress = (step - warmup) / (cfg.iters - warmup)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# State and inputs
# ---------------------------------------------------------------------------

@dataclass
class FitState:
    scene: GaussianScene
    step: int = 0
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    history: List[LossReport] = field(default_factory=list)
    rng: Optional[np.random.Generator] = None

    @classmethod
    def start(cls, scene: GaussianScene, cfg: FitConfig) -> "FitState":
        moments = {
            name: (np.zeros(getattr(scene, name).shape), np.zeros(getattr(scene, name).shape))
            for name in PARAM_NAMES
        }
        return cls(scene=scene, moments=moments, rng=np.random.default_rng(cfg.seed))


@dataclass
class FitContext:
    """Constant per-run inputs: views, clean targets and everything derived from the frozen teacher"""

    views: List[CameraView]
    targets: List[ImageLinear]
    degraded: List[ImageLinear]
    teacher_points: PointMap
    extractor: Extractor
    clean_pyramids: List[FeaturePyramid]
    voxel_sizes: List[float]
    voxel_origin: np.ndarray
    _teacher_stats: Dict[Tuple[int, ...], Optional[List[Optional[VoxelStats]]]] = field(default_factory=dict)

    def teacher_stats(self, indices: Sequence[int]) -> Optional[List[Optional[VoxelStats]]]:
        key = tuple(indices)
        if key not in self._teacher_stats:
            points = PointMap.stack(self.teacher_points.view(i) for i in key)
            try:
                self._teacher_stats[key] = _branch_stats(
                    points, [self.clean_pyramids[i] for i in key], self.voxel_sizes, self.voxel_origin,
                )[0]
            except EmptySelectionError as e:
                logger.warning(f"Teacher voxel grid is empty for views {key}: {e}")
                self._teacher_stats[key] = None
        return self._teacher_stats[key]


def _branch_stats(points: PointMap, pyramids: Sequence[FeaturePyramid], sizes, origin):
    """Voxel stats per pyramid level, with the grids they were computed from.

    Levels with no valid site come back as None; raises only when every level is empty.
    """
    stats: List[Optional[VoxelStats]] = []
    grids: List[Optional[VoxelGrid]] = []
    for level, size in enumerate(sizes):
        level_points = downsample_points(points, 2 ** level)
        feats = np.stack([p[level] for p in pyramids])
        if feats.shape[:3] != level_points.shape:
            raise ShapeMismatchError(f"level {level + 1} features {feats.shape} vs points {level_points.shape}")
        try:
            grid = voxelize(level_points, feats, size, origin)
        except EmptySelectionError:
            grids.append(None)
            stats.append(None)
            continue
        grids.append(grid)
        stats.append(voxel_stats(grid, scale=level + 1))
    if all(s is None for s in stats):
        raise EmptySelectionError("no pooling level has a valid site")
    return stats, grids


def prepare_context(
    views: Sequence[CameraView],
    targets: Sequence[ImageLinear],
    degraded: Sequence[ImageLinear],
    teacher_points: PointMap,
    cfg: FitConfig,
    low_points: Optional[PointMap] = None,
) -> FitContext:
    views, targets, degraded = list(views), list(targets), list(degraded)
    if not views:
        raise EmptySelectionError("fit needs at least one view")
    if not len(views) == len(targets) == len(degraded):
        raise ShapeMismatchError(f"{len(views)} views, {len(targets)} targets, {len(degraded)} degraded inputs")
    sizes = {(v.height, v.width) for v in views}
    if len(sizes) != 1:
        raise ShapeMismatchError(f"all views must share one resolution, got {sorted(sizes)}")
    h, w = sizes.pop()
    for img in targets + degraded:
        if (img.height, img.width) != (h, w):
            raise ShapeMismatchError(f"image {(img.height, img.width)} does not match views {(h, w)}")

    if cfg.distill_source == "low":
        if low_points is None:
            raise ConfigError("distill_source 'low' needs a low-light point map")
        points = low_points
    else:
        points = teacher_points
    if points.shape != (len(views), h, w):
        raise ShapeMismatchError(f"teacher point map {points.shape} does not match {(len(views), h, w)}")

    extractor = build_extractor(cfg.extractor)
    clean_pyramids = [extractor.extract(img) for img in targets]

    valid = points.points[points.mask]
    if valid.size:
        bbox_min, bbox_max = valid.min(axis=0), valid.max(axis=0)
    else:
        logger.warning("Teacher point map has no valid pixels; voxel and distillation terms will be zero")
        bbox_min, bbox_max = np.zeros(3), np.ones(3)
    levels = len(cfg.voxel_weights)
    if cfg.voxel_base_size is not None:
        voxel_sizes = [cfg.voxel_base_size * 2.0 ** i for i in range(levels)]
    else:
        try:
            voxel_sizes = default_voxel_sizes(bbox_min, bbox_max, levels)
        except ConfigError:
            logger.warning("Teacher points span a degenerate box; using unit voxel sizes")
            voxel_sizes = [2.0 ** i for i in range(levels)]

    return FitContext(
        views=views, targets=targets, degraded=degraded, teacher_points=points,
        extractor=extractor, clean_pyramids=clean_pyramids,
        voxel_sizes=voxel_sizes, voxel_origin=np.asarray(bbox_min, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def _student_points(outputs: Sequence[RenderOutput], views: Sequence[CameraView], min_alpha: float):
    maps, masks = [], []
    for out, cam in zip(outputs, views):
        valid = (out.alpha >= min_alpha) & (out.depth > 0)
        maps.append(backproject(DepthMap(np.where(valid, out.depth, 0.0)), cam))
        masks.append(valid)
    return PointMap.stack(maps), masks


def evaluate_objective(
    scene: GaussianScene,
    ctx: FitContext,
    cfg: FitConfig,
    indices: Optional[Sequence[int]] = None,
    pool: Optional[ThreadPoolExecutor] = None,
) -> Tuple[Dict[str, float], SceneGrad]:
    """Loss terms and the gradient of the weighted total for the selected views"""
    indices = list(range(len(ctx.views))) if indices is None else list(indices)
    views = [ctx.views[i] for i in indices]
    targets = [ctx.targets[i] for i in indices]
    opts = cfg.render
    lam, omega = cfg.lumos, cfg.objective

    def _map(fn, *args):
        return list(pool.map(fn, *args)) if pool is not None else list(map(fn, *args))

    rendered = _map(lambda cam: render_with_tape(scene, cam, opts), views)
    outputs = [out for out, _ in rendered]
    rgb = [out.rgb for out in outputs]

    rec, g_rec = rec_loss(rgb, targets, cfg.rec_kind)
    image, g_image = image_loss(rgb, targets)

    pyramids = _map(ctx.extractor.extract, rgb)
    content, g_content = content_loss(pyramids, [ctx.clean_pyramids[i] for i in indices], cfg.content_weights)
    feature_grads = [
        [None if g is None else lam.lambda_c * omega.omega_lumos * g for g in per_view]
        for per_view in g_content
    ]

    # distillation on points back-projected from rendered depth
    student, valid_masks = _student_points(outputs, views, cfg.depth_valid_alpha)
    teacher = PointMap.stack(ctx.teacher_points.view(i) for i in indices)
    depth_grads = [np.zeros((cam.height, cam.width)) for cam in views]
    try:
        distill, g_points = distill_loss(student, teacher)
        for v, cam in enumerate(views):
            depth_grads[v] = omega.omega_distill * backproject_backward(g_points[v], cam) * valid_masks[v]
    except EmptySelectionError as e:
        logger.warning(f"Step skips distillation: {e}")
        distill = 0.0

    # voxel statistics; teacher branch is frozen
    voxel = 0.0
    teacher_stats = ctx.teacher_stats(indices)
    if teacher_stats is not None:
        try:
            restored_stats, grids = _branch_stats(student, pyramids, ctx.voxel_sizes, ctx.voxel_origin)
            voxel, stat_grads = voxel_loss(restored_stats, teacher_stats, cfg.voxel_weights)
        except EmptySelectionError as e:
            logger.warning(f"Step skips voxel loss: {e}")
        else:
            scale = lam.lambda_v * omega.omega_lumos
            for level, (grid, stats, level_grads) in enumerate(zip(grids, restored_stats, stat_grads)):
                if level_grads is None:
                    continue
                g_mu, g_sigma = level_grads
                g_feats = voxelize_backward(grid, voxel_stats_backward(grid, stats, g_mu, g_sigma))
                for v in range(len(views)):
                    part = scale * g_feats[v]
                    current = feature_grads[v][level]
                    feature_grads[v][level] = part if current is None else current + part

    pixel_from_features = _map(ctx.extractor.backward, rgb, feature_grads)

    upstreams = [
        RenderUpstream(
            rgb=omega.omega_rec * g_rec[v]
            + omega.omega_lumos * lam.lambda_i * g_image[v]
            + pixel_from_features[v],
            depth=depth_grads[v],
        )
        for v in range(len(views))
    ]
    grads = _map(
        lambda cam, up, tape: render_backward(scene, cam, opts, up, tape),
        views, upstreams, [tape for _, tape in rendered],
    )
    total = SceneGrad.zeros(scene)
    for g in grads:
        total = total + g

    values = {"rec": rec, "distill": distill, "content": content, "image": image, "voxel": voxel}
    return values, total


def _project_constraints(params: Dict[str, np.ndarray], dtype) -> Dict[str, np.ndarray]:
    if "rotations" in params:
        q = params["rotations"]
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        # rows already unit length at the scene's precision are left bit-identical
        off = np.abs(norms - 1.0) > 8.0 * np.finfo(dtype).eps
        params["rotations"] = np.where(off, q / norms, q)
    if "opacities" in params:
        params["opacities"] = np.clip(params["opacities"], 0.0, 1.0)
    if "scales" in params:
        params["scales"] = np.maximum(params["scales"], SCALE_FLOOR)
    return params


def adam_update(state: FitState, grad: SceneGrad, lr: float, cfg: FitConfig) -> GaussianScene:
    t = state.step + 1
    scene = state.scene
    params = {}
    for name in cfg.trainable.enabled():
        g = getattr(grad, name).astype(np.float64)
        m, v = state.moments[name]
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.moments[name] = (m, v)
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        step_lr = lr * cfg.lr_scale.for_param(name)
        params[name] = getattr(scene, name).astype(np.float64) - step_lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    params = _project_constraints(params, scene.dtype)
    return scene.with_params(**{name: p.astype(scene.dtype) for name, p in params.items()})


def _select_views(state: FitState, count: int, cfg: FitConfig) -> List[int]:
    if cfg.views_per_step is None or cfg.views_per_step >= count:
        return list(range(count))
    return sorted(int(i) for i in state.rng.choice(count, size=cfg.views_per_step, replace=False))


def step(
    state: FitState, ctx: FitContext, cfg: FitConfig, pool: Optional[ThreadPoolExecutor] = None
) -> Tuple[FitState, LossReport]:
    """One optimizer step: render, score, backpropagate, update and project"""
    lr = lr_schedule(state.step, cfg)
    indices = _select_views(state, len(ctx.views), cfg)
    values, grad = evaluate_objective(state.scene, ctx, cfg, indices, pool)
    report = build_report(**values, lumos_w=cfg.lumos, objective_w=cfg.objective, step=state.step, lr=lr)
    if not report.is_finite() or not grad.is_finite():
        raise NumericalError(f"non-finite loss or gradient at step {state.step}: {report.model_dump()}")

    state.scene = adam_update(state, grad, lr, cfg)
    state.history.append(report)
    state.step += 1
    return state, report


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    scene: GaussianScene
    history: List[LossReport]
    baseline: Optional[MetricReport] = None
    final: Optional[MetricReport] = None


def render_views(scene: GaussianScene, views: Sequence[CameraView], cfg: FitConfig) -> List[RenderOutput]:
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(lambda cam: render(scene, cam, cfg.render), views))


def fit_scene(
    init_scene: GaussianScene,
    views: Sequence[CameraView],
    targets: Sequence[ImageLinear],
    degraded: Sequence[ImageLinear],
    teacher_points: PointMap,
    cfg: FitConfig,
    low_points: Optional[PointMap] = None,
    evaluate: bool = True,
    progress: bool = False,
    on_report: Optional[Callable[[LossReport], None]] = None,
) -> FitResult:
    ctx = prepare_context(views, targets, degraded, teacher_points, cfg, low_points)
    baseline = evaluate_views(ctx.degraded, ctx.targets, threads=cfg.threads) if evaluate else None

    state = FitState.start(init_scene, cfg)
    logger.info(f"Fitting {len(init_scene)} primitives on {len(ctx.views)} views for {cfg.iters} steps")
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        bar = tqdm(range(cfg.iters), desc="fit", disable=not progress)
        for _ in bar:
            state, report = step(state, ctx, cfg, pool)
            if on_report is not None:
                on_report(report)
            bar.set_postfix(total=f"{report.total:.4g}", lr=f"{report.lr:.2e}")

    final = None
    if evaluate:
        rendered = render_views(state.scene, ctx.views, cfg)
        final = evaluate_views([out.rgb for out in rendered], ctx.targets, threads=cfg.threads)
        logger.info(
            f"Fit done: PSNR {baseline.mean_psnr:.2f} -> {final.mean_psnr:.2f} dB, "
            f"SSIM {baseline.mean_ssim:.4f} -> {final.mean_ssim:.4f}"
        )
    return FitResult(scene=state.scene, history=state.history, baseline=baseline, final=final)


ABLATION_VARIANTS = ("rec+distill", "+content", "+content+image", "+content+image+voxel")


def ablation_configs(cfg: FitConfig) -> Dict[str, FitConfig]:
    """Loss ablation ladder: each variant switches on one more Lumos term"""
    lam = cfg.lumos
    ladders = (
        LumosWeights(lambda_c=0.0, lambda_i=0.0, lambda_v=0.0),
        LumosWeights(lambda_c=lam.lambda_c, lambda_i=0.0, lambda_v=0.0),
        LumosWeights(lambda_c=lam.lambda_c, lambda_i=lam.lambda_i, lambda_v=0.0),
        lam,
    )
    return {name: cfg.model_copy(update={"lumos": w}) for name, w in zip(ABLATION_VARIANTS, ladders)}


def run_ablation(
    init_scene: GaussianScene,
    views: Sequence[CameraView],
    targets: Sequence[ImageLinear],
    degraded: Sequence[ImageLinear],
    teacher_points: PointMap,
    cfg: FitConfig,
    low_points: Optional[PointMap] = None,
    progress: bool = False,
) -> Dict[str, MetricReport]:
    reports = {}
    for name, variant in ablation_configs(cfg).items():
        logger.info(f"Ablation variant {name}")
        result = fit_scene(
            init_scene, views, targets, degraded, teacher_points, variant,
            low_points=low_points, progress=progress,
        )
        reports[name] = result.final
    return reports
