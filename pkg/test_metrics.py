import numpy as np
import pytest

from core import ImageLinear, decode_srgb8, image_save
from errors import EmptySelectionError, ShapeMismatchError
from metrics import PSNR_CAP, evaluate_dirs, evaluate_views, psnr, quantize, ssim, view_metrics


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).uniform(0.0, 1.0, (16, 16, 3))
    assert psnr(a, a) == PSNR_CAP == 99.0


def test_psnr_uniform_offset():
    a = np.full((16, 16, 3), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_brute_force():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0.0, 1.0, (9, 7, 3)), rng.uniform(0.0, 1.0, (9, 7, 3))
    total = 0.0
    for idx in np.ndindex(a.shape):
        total += (a[idx] - b[idx]) ** 2
    expected = 10.0 * np.log10(1.0 / (total / a.size))
    assert psnr(a, b) == pytest.approx(expected, abs=1e-9)


def test_ssim_identical_is_one():
    a = np.random.default_rng(2).uniform(0.0, 1.0, (24, 24, 3))
    assert ssim(a, a) == pytest.approx(1.0)


def test_ssim_constant_images_closed_form():
    c1 = 0.01 ** 2
    expected = (2 * 0.2 * 0.8 + c1) / (0.2 ** 2 + 0.8 ** 2 + c1)
    value = ssim(np.full((16, 16), 0.2), np.full((16, 16), 0.8))
    assert value == pytest.approx(expected, abs=1e-6)
    assert value == pytest.approx(0.4707, abs=1e-4)


def test_ssim_symmetric_and_flip_invariant():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0.0, 1.0, (20, 20, 3)), rng.uniform(0.0, 1.0, (20, 20, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(a[:, ::-1], b[:, ::-1]), abs=1e-9)
    assert ssim(a, b) < 1.0


def test_ssim_small_images_rejected():
    with pytest.raises(ShapeMismatchError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(ShapeMismatchError):
        psnr(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


def test_quantize_snaps_to_codes():
    codes = np.random.default_rng(4).integers(0, 256, (5, 5, 3))
    img = ImageLinear(decode_srgb8(codes))
    np.testing.assert_allclose(quantize(img) * 255.0, codes, atol=1e-9)


def test_view_metrics_on_quantized_images():
    rng = np.random.default_rng(5)
    img = ImageLinear(rng.uniform(0.0, 1.0, (16, 16, 3)))
    nudged = ImageLinear(img.pixels * (1.0 + 1e-9))
    m = view_metrics("v", img, nudged)
    assert m.psnr == 99.0
    assert m.ssim == pytest.approx(1.0)


def test_evaluate_views_report():
    rng = np.random.default_rng(6)
    preds = [ImageLinear(rng.uniform(0.0, 1.0, (16, 16, 3))) for _ in range(3)]
    gts = [ImageLinear(rng.uniform(0.0, 1.0, (16, 16, 3))) for _ in range(3)]
    report = evaluate_views(preds, gts, threads=2)
    assert [v.name for v in report.views] == ["view_000", "view_001", "view_002"]
    assert report.mean_psnr == pytest.approx(np.mean([v.psnr for v in report.views]))
    single = [view_metrics("x", p, g) for p, g in zip(preds, gts)]
    assert [v.psnr for v in report.views] == [v.psnr for v in single]
    with pytest.raises(EmptySelectionError):
        evaluate_views([], [])


def test_evaluate_dirs(tmp_path):
    rng = np.random.default_rng(7)
    (tmp_path / "pred").mkdir()
    for name in ("a.png", "b.png"):
        image_save(ImageLinear(rng.uniform(0.0, 1.0, (16, 16, 3))), tmp_path / "pred" / name)
    report = evaluate_dirs(tmp_path / "pred", tmp_path / "pred")
    assert report.mean_psnr == 99.0
    assert report.mean_ssim == pytest.approx(1.0)
    (tmp_path / "gt").mkdir()
    with pytest.raises(FileNotFoundError):
        evaluate_dirs(tmp_path / "pred", tmp_path / "gt")


def test_psnr_strictly_decreases_with_noise():
    rng = np.random.default_rng(8)
    clean = rng.uniform(0.3, 0.7, (24, 24, 3))
    noise = rng.uniform(-1.0, 1.0, clean.shape)
    scores = [psnr(clean, clean + amp * noise) for amp in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(hi > lo for hi, lo in zip(scores, scores[1:]))
