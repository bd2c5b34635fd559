import time

import numpy as np
import pytest

import fit
from core import ImageLinear
from degrade import darken, sample_params
from errors import ConfigError, NumericalError
from fit import (
    FitState, ablation_configs, adam_update, evaluate_objective, fit_scene, lr_schedule,
    prepare_context, run_ablation, step,
)
from geometry import PointMap
from models import DegradeConfig, FitConfig, LumosWeights, ObjectiveWeights, ParamScales, TrainableParams
from renderer import SceneGrad
from sh import SH_C0
import synth

# laptop CPU wall-clock budget for the 300-primitive, 1000-step run
FULL_RUN_SECONDS = 15 * 60


def _fit_inputs(synthetic):
    targets = [out.rgb for out in synthetic.renders]
    p = sample_params(DegradeConfig(exposure_min=0.075, exposure_max=0.075, gamma_min=1.35, gamma_max=1.35))
    degraded = [darken(img, p) for img in targets]
    return synthetic.views, targets, degraded, synthetic.teacher_points


def _gray(scene):
    return scene.with_params(sh=np.zeros_like(scene.sh))


def _assert_same_scene(a, b, atol=0.0):
    for name in ("centers", "opacities", "rotations", "scales", "sh"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=atol, rtol=0)


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = FitConfig(iters=100, warmup=10, lr_max=2e-4)
    assert lr_schedule(10, cfg) == pytest.approx(2e-4)
    assert lr_schedule(55, cfg) == pytest.approx(1e-4)
    assert lr_schedule(0, cfg) == pytest.approx(2e-5)
    end = lr_schedule(99, cfg)
    assert end == pytest.approx(2e-4 * 0.5 * (1.0 + np.cos(np.pi * (1.0 - 1.0 / 90.0))), rel=1e-9)
    assert end < 1e-7
    with pytest.raises(ConfigError):
        lr_schedule(100, cfg)


def test_lr_schedule_respects_floor():
    cfg = FitConfig(iters=50, warmup=0, lr_max=1e-3, lr_min=1e-4)
    values = [lr_schedule(s, cfg) for s in range(50)]
    assert values[0] == pytest.approx(1e-3)
    assert min(values) >= 1e-4
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_default_warmup_shrinks_with_run_length():
    assert FitConfig(iters=30000).effective_warmup == 1000
    assert FitConfig(iters=300).effective_warmup == 10
    assert FitConfig(iters=300, warmup=0).effective_warmup == 0
    with pytest.raises(ValueError):
        FitConfig(iters=10, warmup=20)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def test_adam_respects_constraints_and_frozen_params(small_scene):
    cfg = FitConfig(iters=1, lr_max=10.0, trainable=TrainableParams(center=False))
    state = FitState.start(small_scene, cfg)
    grad = SceneGrad.zeros(small_scene)
    grad.opacities[:] = -1.0
    grad.scales[:] = 1.0
    grad.rotations[:] = 0.3
    grad.centers[:] = 1.0
    scene = adam_update(state, grad, 10.0, cfg)
    assert np.all(scene.opacities == 1.0)
    assert np.all(scene.scales >= 1e-6)
    np.testing.assert_allclose(np.linalg.norm(scene.rotations, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(scene.centers, small_scene.centers)


def test_adam_zero_gradient_keeps_scene_bit_identical(small_scene):
    cfg = FitConfig(iters=3, lr_max=0.01)
    state = FitState.start(small_scene, cfg)
    for _ in range(3):
        state.scene = adam_update(state, SceneGrad.zeros(small_scene), 0.01, cfg)
        state.step += 1
    for name in ("centers", "opacities", "rotations", "scales", "sh"):
        np.testing.assert_array_equal(getattr(state.scene, name), getattr(small_scene, name))


def test_adam_renormalizes_drifted_quaternions(small_scene):
    cfg = FitConfig(iters=1, trainable=TrainableParams(center=False, opacity=False, scale=False, sh=False))
    grad = SceneGrad.zeros(small_scene)
    grad.rotations[:, 0] = 1.0
    scene = adam_update(FitState.start(small_scene, cfg), grad, 0.1, cfg)
    np.testing.assert_allclose(np.linalg.norm(scene.rotations, axis=1), 1.0, atol=1e-12)
    assert not np.array_equal(scene.rotations, small_scene.rotations)


def test_adam_lr_scale_zero_freezes_class(small_scene):
    cfg = FitConfig(iters=1, lr_scale=ParamScales(sh=0.0))
    state = FitState.start(small_scene, cfg)
    grad = SceneGrad.zeros(small_scene)
    grad.sh[:] = 1.0
    grad.opacities[:] = 1.0
    scene = adam_update(state, grad, 0.01, cfg)
    np.testing.assert_array_equal(scene.sh, small_scene.sh)
    assert np.all(scene.opacities < small_scene.opacities)


# ---------------------------------------------------------------------------
# Objective and step
# ---------------------------------------------------------------------------

def test_prepare_context_checks_inputs(tiny_synthetic):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    with pytest.raises(ConfigError):
        prepare_context(views, targets, degraded, teacher, FitConfig(distill_source="low"))
    with pytest.raises(ValueError):
        prepare_context(views, targets[:-1], degraded, teacher, FitConfig())
    ctx = prepare_context(views, targets, degraded, teacher, FitConfig())
    assert len(ctx.voxel_sizes) == 5
    assert ctx.voxel_sizes[1] == pytest.approx(2 * ctx.voxel_sizes[0])


def test_objective_values_are_finite(tiny_synthetic):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    cfg = FitConfig(iters=1)
    ctx = prepare_context(views, targets, degraded, teacher, cfg)
    values, grad = evaluate_objective(_gray(tiny_synthetic.scene), ctx, cfg)
    assert set(values) == {"rec", "distill", "content", "image", "voxel"}
    assert all(np.isfinite(v) and v >= 0.0 for v in values.values())
    assert values["image"] > 0.0
    assert grad.is_finite()


def test_teacher_stats_cached_per_view_subset(tiny_synthetic):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    ctx = prepare_context(views, targets, degraded, teacher, FitConfig())
    first = ctx.teacher_stats([0, 2])
    assert ctx.teacher_stats([0, 2]) is first
    assert ctx.teacher_stats([1]) is not first


def test_voxel_term_survives_empty_coarse_levels(tiny_synthetic):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    cfg = FitConfig(iters=2, lr_max=0.01)
    ctx = prepare_context(views, targets, degraded, teacher, cfg)
    stats = ctx.teacher_stats(range(len(views)))
    assert stats is not None and len(stats) == 5
    assert stats[0] is not None
    values, _ = evaluate_objective(_gray(tiny_synthetic.scene), ctx, cfg)
    assert values["voxel"] > 0.0
    result = fit_scene(_gray(tiny_synthetic.scene), views, targets, degraded, teacher, cfg, evaluate=False)
    assert all(r.voxel > 0.0 for r in result.history)


def test_matching_scene_is_a_fixed_point(tiny_synthetic):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    cfg = FitConfig(
        iters=3, lr_max=0.01,
        objective=ObjectiveWeights(omega_rec=1.0, omega_distill=0.0, omega_lumos=0.0),
    )
    result = fit_scene(tiny_synthetic.scene, views, targets, degraded, teacher, cfg, evaluate=False)
    assert result.history[0].rec == 0.0
    _assert_same_scene(result.scene, tiny_synthetic.scene, atol=1e-12)


def test_all_weights_zero_leave_scene_unchanged(tiny_synthetic):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    cfg = FitConfig(
        iters=3, lr_max=0.01,
        objective=ObjectiveWeights(omega_rec=0.0, omega_distill=0.0, omega_lumos=0.0),
    )
    start = _gray(tiny_synthetic.scene)
    result = fit_scene(start, views, targets, degraded, teacher, cfg, evaluate=False)
    _assert_same_scene(result.scene, start, atol=1e-6)
    assert all(r.total == 0.0 for r in result.history)


def test_zero_iterations_return_the_input(tiny_synthetic):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    result = fit_scene(tiny_synthetic.scene, views, targets, degraded, teacher, FitConfig(iters=0), evaluate=False)
    assert result.scene is tiny_synthetic.scene
    assert result.history == []


def test_fit_is_deterministic(tiny_synthetic):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    cfg = FitConfig(iters=4, lr_max=0.01, views_per_step=2, seed=3, threads=2)
    a = fit_scene(_gray(tiny_synthetic.scene), views, targets, degraded, teacher, cfg, evaluate=False)
    b = fit_scene(_gray(tiny_synthetic.scene), views, targets, degraded, teacher, cfg, evaluate=False)
    assert [r.model_dump() for r in a.history] == [r.model_dump() for r in b.history]
    _assert_same_scene(a.scene, b.scene)


def test_reports_are_consistent(tiny_synthetic):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    cfg = FitConfig(iters=3, lr_max=0.01, lumos=LumosWeights(lambda_c=0.3, lambda_i=0.7, lambda_v=0.05))
    reports = []
    fit_scene(
        _gray(tiny_synthetic.scene), views, targets, degraded, teacher, cfg,
        evaluate=False, on_report=reports.append,
    )
    assert [r.step for r in reports] == [0, 1, 2]
    assert all(r.is_consistent(cfg.lumos, cfg.objective) for r in reports)


def test_non_finite_loss_raises(tiny_synthetic, monkeypatch):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    cfg = FitConfig(iters=1)
    ctx = prepare_context(views, targets, degraded, teacher, cfg)
    monkeypatch.setattr(fit, "rec_loss", lambda *args, **kwargs: (float("nan"), np.zeros((4, 32, 32, 3))))
    with pytest.raises(NumericalError):
        step(FitState.start(tiny_synthetic.scene, cfg), ctx, cfg)


def test_empty_teacher_mask_zeroes_distillation(tiny_synthetic, caplog):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    empty = PointMap(teacher.points, np.zeros(teacher.shape, dtype=bool))
    cfg = FitConfig(iters=1)
    ctx = prepare_context(views, targets, degraded, empty, cfg)
    with caplog.at_level("WARNING"):
        values, grad = evaluate_objective(tiny_synthetic.scene, ctx, cfg)
    assert values["distill"] == 0.0
    assert values["voxel"] == 0.0
    assert grad.is_finite()
    assert "distillation" in caplog.text


def test_low_light_distillation_source(tiny_synthetic):
    views, targets, degraded, teacher = _fit_inputs(tiny_synthetic)
    shifted = PointMap(teacher.points + 0.05, teacher.mask)
    cfg = FitConfig(iters=1, distill_source="low")
    ctx = prepare_context(views, targets, degraded, teacher, cfg, low_points=shifted)
    values, _ = evaluate_objective(tiny_synthetic.scene, ctx, cfg)
    assert values["distill"] > 0.0


def test_color_only_fit_recovers_colors():
    synthetic = synth.build_scene(seed=2, n_primitives=50, n_views=4, width=32, height=32, dtype=np.float64)
    views, targets, degraded, teacher = _fit_inputs(synthetic)
    rng = np.random.default_rng(0)
    colors = synthetic.scene.sh[:, 0] * SH_C0 + 0.5
    noisy = np.clip(colors + rng.normal(0.0, 0.2, colors.shape), 0.05, 0.95)
    sh = synthetic.scene.sh.copy()
    sh[:, 0] = (noisy - 0.5) / SH_C0
    start = synthetic.scene.with_params(sh=sh)

    cfg = FitConfig(
        iters=300, lr_max=0.05,
        trainable=TrainableParams(center=False, opacity=False, rotation=False, scale=False, sh=True),
    )
    result = fit_scene(start, views, targets, degraded, teacher, cfg, evaluate=False)
    images = np.array([r.image for r in result.history])
    assert images[-1] < 0.1 * images[0]
    assert images[-50:].mean() < images[:50].mean()


def test_restoration_improves_over_degraded_inputs():
    synthetic = synth.build_scene(seed=4, n_primitives=100, n_views=4, width=32, height=32, dtype=np.float64)
    views, targets, degraded, teacher = _fit_inputs(synthetic)
    cfg = FitConfig(
        iters=200, lr_max=0.02,
        lr_scale=ParamScales(center=0.02, opacity=0.5, rotation=0.5, scale=0.02, sh=1.0),
    )
    result = fit_scene(_gray(synthetic.scene), views, targets, degraded, teacher, cfg)
    assert result.final.mean_psnr >= result.baseline.mean_psnr + 5.0
    assert result.final.mean_ssim >= result.baseline.mean_ssim + 0.05
    assert all(r.is_consistent(cfg.lumos, cfg.objective) for r in result.history)


def test_ablation_ladder_configs():
    cfg = FitConfig(iters=1)
    variants = ablation_configs(cfg)
    assert list(variants) == list(fit.ABLATION_VARIANTS)
    assert variants["rec+distill"].lumos.lambda_c == 0.0
    assert variants["+content"].lumos.lambda_i == 0.0
    assert variants["+content+image"].lumos.lambda_v == 0.0
    assert variants["+content+image+voxel"].lumos == cfg.lumos


@pytest.mark.slow
def test_full_restoration_run():
    synthetic = synth.build_scene(seed=0, n_primitives=300, n_views=6, dtype=np.float64)
    views, targets, degraded, teacher = _fit_inputs(synthetic)
    cfg = FitConfig(
        iters=1000, lr_max=0.01, threads=4,
        lr_scale=ParamScales(center=0.02, opacity=0.5, rotation=0.5, scale=0.02, sh=1.0),
    )
    started = time.perf_counter()
    result = fit_scene(_gray(synthetic.scene), views, targets, degraded, teacher, cfg)
    assert time.perf_counter() - started <= FULL_RUN_SECONDS
    assert result.final.mean_psnr >= result.baseline.mean_psnr + 5.0
    assert result.final.mean_ssim >= result.baseline.mean_ssim + 0.05
    assert all(r.is_consistent(cfg.lumos, cfg.objective) for r in result.history)


@pytest.mark.slow
def test_ablation_direction():
    synthetic = synth.build_scene(seed=0, n_primitives=300, n_views=6, dtype=np.float64)
    views, targets, degraded, teacher = _fit_inputs(synthetic)
    cfg = FitConfig(
        iters=1000, lr_max=0.01, threads=4,
        lr_scale=ParamScales(center=0.02, opacity=0.5, rotation=0.5, scale=0.02, sh=1.0),
    )
    reports = run_ablation(_gray(synthetic.scene), views, targets, degraded, teacher, cfg)
    assert reports["+content+image"].mean_psnr >= reports["+content"].mean_psnr
    assert reports["+content+image+voxel"].mean_psnr >= reports["+content+image"].mean_psnr - 0.1
