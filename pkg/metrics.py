"""PSNR and SSIM on 8-bit sRGB quantized renders."""
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence
from pathlib import Path
from skimage.metrics import structural_similarity
import numpy as np
import logging

from core import ImageLinear, PathLike, encode_srgb8, image_load, list_pngs
from errors import EmptySelectionError, ShapeMismatchError
from models import MetricReport, ViewMetrics

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_LUMA = np.array([0.299, 0.587, 0.114])


def quantize(img: ImageLinear) -> np.ndarray:
    """Encoded sRGB in [0, 1] as it would be read back from an 8-bit PNG"""
    return encode_srgb8(img.pixels).astype(np.float64) / 255.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr inputs differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM on luminance, 11x11 Gaussian window (sigma 1.5), peak 1"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim inputs differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a @ SSIM_LUMA, b @ SSIM_LUMA
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeMismatchError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    value = structural_similarity(
        a, b,
        data_range=1.0,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=SSIM_K1,
        K2=SSIM_K2,
    )
    return float(np.clip(value, -1.0, 1.0))


def view_metrics(name: str, pred: ImageLinear, gt: ImageLinear) -> ViewMetrics:
    qp, qg = quantize(pred), quantize(gt)
    return ViewMetrics(name=name, psnr=psnr(qp, qg), ssim=ssim(qp, qg))


def evaluate_views(
    preds: Sequence[ImageLinear],
    gts: Sequence[ImageLinear],
    names: Optional[Sequence[str]] = None,
    threads: int = 1,
) -> MetricReport:
    if len(preds) != len(gts):
        raise ShapeMismatchError(f"{len(preds)} predictions vs {len(gts)} ground-truth views")
    if not preds:
        raise EmptySelectionError("no views to evaluate")
    names = list(names) if names is not None else [f"view_{i:03d}" for i in range(len(preds))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        views: List[ViewMetrics] = list(pool.map(view_metrics, names, preds, gts))
    return MetricReport.from_views(views)


def evaluate_dirs(pred_dir: PathLike, gt_dir: PathLike, threads: int = 1) -> MetricReport:
    """Pair PNGs by file name; every prediction needs a ground-truth counterpart"""
    preds = list_pngs(pred_dir)
    if not preds:
        raise EmptySelectionError(f"no PNG images in {pred_dir}")
    gts = [Path(gt_dir) / p.name for p in preds]
    missing = [str(p) for p in gts if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing ground truth for {missing}")
    report = evaluate_views(
        [image_load(p) for p in preds], [image_load(p) for p in gts],
        names=[p.name for p in preds], threads=threads,
    )
    logger.info(f"Evaluated {len(preds)} views: PSNR {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f}")
    return report
