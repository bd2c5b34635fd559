"""Synthetic illumination degradation: exposure scaling and gamma in linear light."""
from typing import Optional
from pathlib import Path
import numpy as np
import logging
import json

from core import ImageLinear, PathLike, image_load, image_save, list_pngs
from errors import ModeMismatchError
from models import DegradeConfig, DegradeMode, DegradeParams

logger = logging.getLogger(__name__)

PARAMS_FILE = "params.json"


def sample_params(config: DegradeConfig, rng: Optional[np.random.Generator] = None) -> DegradeParams:
    """One uniform draw of (exposure, gamma); all views of a scene share it"""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    exposure = rng.uniform(config.exposure_min, config.exposure_max)
    gamma = rng.uniform(config.gamma_min, config.gamma_max)
    return DegradeParams(exposure=float(exposure), gamma=float(gamma), mode=config.mode)


def _require_mode(p: DegradeParams, mode: DegradeMode) -> None:
    if p.mode != mode:
        raise ModeMismatchError(f"{mode.value} transform called with {p.mode.value} params")


def darken(img: ImageLinear, p: DegradeParams) -> ImageLinear:
    _require_mode(p, DegradeMode.LOW_LIGHT)
    v = np.clip(p.exposure * img.pixels.astype(np.float64), 0.0, 1.0)
    return ImageLinear((v ** p.gamma).astype(img.pixels.dtype))


def overexpose(img: ImageLinear, p: DegradeParams) -> ImageLinear:
    """Gamma after exposure, then clip at 1 for sensor saturation"""
    _require_mode(p, DegradeMode.OVER_EXPOSURE)
    v = (p.exposure * img.pixels.astype(np.float64)) ** p.gamma
    return ImageLinear(np.clip(v, 0.0, 1.0).astype(img.pixels.dtype))


def degrade(img: ImageLinear, p: DegradeParams) -> ImageLinear:
    if p.mode == DegradeMode.OVER_EXPOSURE:
        return overexpose(img, p)
    return darken(img, p)


def undegrade(img: ImageLinear, p: DegradeParams) -> ImageLinear:
    """Inverse of darken/overexpose on pixels that were not clipped"""
    if not (p.exposure > 0 and p.gamma > 0):
        raise ValueError(f"params not invertible: exposure={p.exposure}, gamma={p.gamma}")
    v = img.pixels.astype(np.float64) ** (1.0 / p.gamma) / p.exposure
    return ImageLinear(v.astype(img.pixels.dtype))


def degrade_dir(in_dir: PathLike, out_dir: PathLike, config: DegradeConfig) -> DegradeParams:
    """Degrade every PNG of a scene with a single parameter draw; records the draw in params.json"""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    paths = list_pngs(in_dir)
    if not paths:
        raise FileNotFoundError(f"no PNG images in {in_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    params = sample_params(config)
    for path in paths:
        image_save(degrade(image_load(path), params), out_dir / path.name)

    with open(out_dir / PARAMS_FILE, "w") as f:
        json.dump(params.model_dump(mode="json"), f, indent=2)
    logger.info(
        f"Degraded {len(paths)} views ({params.mode.value}, exposure {params.exposure:.4f}, gamma {params.gamma:.4f})"
    )
    return params


def read_params(path: PathLike) -> DegradeParams:
    with open(path, "r") as f:
        return DegradeParams.model_validate(json.load(f))
