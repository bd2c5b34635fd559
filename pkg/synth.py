"""Deterministic synthetic scenes and ring cameras for offline end-to-end runs."""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
from pathlib import Path
import numpy as np
import logging
import math

from core import (
    GaussianScene, PathLike, image_save, normalize_quats, ply_write, sh_coeff_count, write_cameras,
)
from errors import ConfigError
from geometry import DepthMap, PointMap, backproject
from models import CameraView, RenderOptions
from renderer import RenderOutput, render
from sh import SH_C0

logger = logging.getLogger(__name__)

DEFAULT_BBOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
WORLD_UP = np.array([0.0, 0.0, 1.0])
RING_RADIUS_FACTOR = 2.5
RING_ELEVATION = 0.3
TEACHER_MIN_ALPHA = 0.5


def _check_bbox(bbox) -> Tuple[np.ndarray, np.ndarray]:
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bbox)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(hi <= lo):
        raise ConfigError(f"invalid bounding box {lo.tolist()} .. {hi.tolist()}")
    return lo, hi


def random_scene(
    seed: int, n_primitives: int, bbox=DEFAULT_BBOX, sh_degree: int = 1, dtype=np.float32
) -> GaussianScene:
    if n_primitives < 1:
        raise ConfigError(f"need at least one primitive, got {n_primitives}")
    lo, hi = _check_bbox(bbox)
    rng = np.random.default_rng(seed)
    half = 0.5 * float(np.mean(hi - lo))

    centers = rng.uniform(lo, hi, size=(n_primitives, 3))
    scales = rng.uniform(0.05, 0.15, size=(n_primitives, 3)) * half
    opacities = rng.uniform(0.5, 0.95, size=n_primitives)
    rotations = normalize_quats(rng.normal(size=(n_primitives, 4)))
    colors = rng.uniform(0.1, 0.9, size=(n_primitives, 3))

    k = sh_coeff_count(sh_degree)
    sh = np.zeros((n_primitives, k, 3))
    sh[:, 0] = (colors - 0.5) / SH_C0
    if k > 1:
        sh[:, 1:] = rng.normal(0.0, 0.05, size=(n_primitives, k - 1, 3))

    return GaussianScene(
        centers=centers.astype(dtype), opacities=opacities.astype(dtype),
        rotations=rotations.astype(dtype), scales=scales.astype(dtype),
        sh=sh.astype(dtype), sh_degree=sh_degree,
    )


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = WORLD_UP) -> np.ndarray:
    """World-to-camera matrix for a camera at eye facing target (+y down in the image)"""
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return w2c


def ring_cameras(
    target: np.ndarray,
    radius: float,
    n_views: int = 6,
    width: int = 64,
    height: int = 64,
    fov_deg: float = 60.0,
) -> List[CameraView]:
    if not 4 <= n_views <= 8:
        raise ConfigError(f"ring rigs use 4 to 8 views, got {n_views}")
    focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    views = []
    for i in range(n_views):
        theta = 2.0 * math.pi * i / n_views
        eye = target + np.array([radius * math.cos(theta), radius * math.sin(theta), RING_ELEVATION * radius])
        views.append(CameraView(
            width=width, height=height, fx=focal, fy=focal,
            cx=0.5 * width, cy=0.5 * height, w2c=look_at(eye, target),
        ))
    return views


def teacher_point_map(outputs: Sequence[RenderOutput], views: Sequence[CameraView]) -> PointMap:
    """Back-projected clean depth, valid where the clean render is mostly opaque"""
    maps = []
    for out, cam in zip(outputs, views):
        valid = out.alpha >= TEACHER_MIN_ALPHA
        maps.append(backproject(DepthMap(np.where(valid, out.depth, 0.0)), cam))
    return PointMap.stack(maps)


@dataclass
class SyntheticScene:
    scene: GaussianScene
    views: List[CameraView]
    renders: List[RenderOutput]
    teacher_points: PointMap

    @property
    def names(self) -> List[str]:
        return view_names(len(self.views))


def view_names(count: int) -> List[str]:
    return [f"view_{i:03d}" for i in range(count)]


def build_scene(
    seed: int,
    n_primitives: int,
    bbox=DEFAULT_BBOX,
    n_views: int = 6,
    width: int = 64,
    height: int = 64,
    sh_degree: int = 1,
    opts: Optional[RenderOptions] = None,
    dtype=np.float32,
) -> SyntheticScene:
    scene = random_scene(seed, n_primitives, bbox, sh_degree, dtype)
    lo, hi = _check_bbox(bbox)
    radius = RING_RADIUS_FACTOR * 0.5 * float(np.linalg.norm(hi - lo))
    target = scene.centers.astype(np.float64).mean(axis=0)
    views = ring_cameras(target, radius, n_views, width, height)
    opts = opts or RenderOptions()
    renders = [render(scene, cam, opts) for cam in views]
    return SyntheticScene(scene=scene, views=views, renders=renders, teacher_points=teacher_point_map(renders, views))


def gen_scene(
    seed: int,
    n_primitives: int,
    out_dir: PathLike,
    bbox=DEFAULT_BBOX,
    n_views: int = 6,
    width: int = 64,
    height: int = 64,
    sh_degree: int = 1,
    opts: Optional[RenderOptions] = None,
) -> List[Path]:
    """Write scene.ply, cams.json, clean/*.png, depth/*.lumt and the teacher point map; returns the paths"""
    synth = build_scene(seed, n_primitives, bbox, n_views, width, height, sh_degree, opts)
    out_dir = Path(out_dir)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)

    written = [out_dir / "scene.ply", out_dir / "cams.json"]
    ply_write(synth.scene, written[0])
    write_cameras(synth.views, written[1])
    for name, out in zip(synth.names, synth.renders):
        image_save(out.rgb, out_dir / "clean" / f"{name}.png")
        DepthMap(out.depth).save(out_dir / "depth" / f"{name}.lumt")
        written += [out_dir / "clean" / f"{name}.png", out_dir / "depth" / f"{name}.lumt"]
    synth.teacher_points.save(out_dir / "teacher_points.lumt")
    written += [out_dir / "teacher_points.lumt", out_dir / "teacher_points.mask.lumt"]
    logger.info(f"Generated {n_primitives} primitives and {n_views} views under {out_dir}")
    return written
