"""Image, reconstruction, Lumos and total objective terms."""
from typing import Sequence, Tuple, Union
import numpy as np
import logging

from core import ImageLinear
from errors import ConfigError, ShapeMismatchError
from models import LossReport, LumosWeights, ObjectiveWeights

logger = logging.getLogger(__name__)

Images = Union[np.ndarray, ImageLinear, Sequence[ImageLinear], Sequence[np.ndarray]]


def stack_images(images: Images) -> np.ndarray:
    """(S, H, W, C) view stack from one image, a list of images or an array"""
    if isinstance(images, ImageLinear):
        return images.pixels[None]
    if isinstance(images, np.ndarray):
        return images[None] if images.ndim == 3 else images
    return np.stack([im.pixels if isinstance(im, ImageLinear) else np.asarray(im) for im in images])


def _pair(restored: Images, clean: Images) -> Tuple[np.ndarray, np.ndarray]:
    r, c = stack_images(restored), stack_images(clean)
    if r.shape != c.shape:
        raise ShapeMismatchError(f"image stacks differ: {r.shape} vs {c.shape}")
    return r, c


def image_loss(restored: Images, clean: Images) -> Tuple[float, np.ndarray]:
    """Mean absolute difference over every view, pixel and channel; subgradient 0 at ties"""
    r, c = _pair(restored, clean)
    diff = r.astype(np.float64) - c
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def rec_loss(rendered: Images, target: Images, kind: str = "mse") -> Tuple[float, np.ndarray]:
    r, c = _pair(rendered, target)
    diff = r.astype(np.float64) - c
    if kind == "l1":
        return float(np.abs(diff).mean()), np.sign(diff) / diff.size
    if kind != "mse":
        raise ConfigError(f"unknown reconstruction loss {kind!r}")
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _check_weights(values: Sequence[float], what: str) -> None:
    if any(v < 0 for v in values):
        raise ConfigError(f"{what} weights must be non-negative, got {list(values)}")


def lumos_loss(content: float, image: float, voxel: float, w: LumosWeights = LumosWeights()) -> float:
    _check_weights((w.lambda_c, w.lambda_i, w.lambda_v), "lumos")
    return w.lambda_c * content + w.lambda_i * image + w.lambda_v * voxel


def total_loss(rec: float, distill: float, lumos: float, w: ObjectiveWeights = ObjectiveWeights()) -> float:
    _check_weights((w.omega_rec, w.omega_distill, w.omega_lumos), "objective")
    return w.omega_rec * rec + w.omega_distill * distill + w.omega_lumos * lumos


def build_report(
    rec: float,
    distill: float,
    content: float,
    image: float,
    voxel: float,
    lumos_w: LumosWeights,
    objective_w: ObjectiveWeights,
    step: int = 0,
    lr: float = 0.0,
) -> LossReport:
    lumos = lumos_loss(content, image, voxel, lumos_w)
    return LossReport(
        step=step, lr=lr, rec=rec, distill=distill, content=content, image=image,
        voxel=voxel, lumos=lumos, total=total_loss(rec, distill, lumos, objective_w),
    )
