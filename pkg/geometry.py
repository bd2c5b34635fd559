"""Depth back-projection, pinhole projection and the cross-illumination distillation loss."""
from dataclasses import dataclass
from typing import Tuple
from pathlib import Path
import numpy as np
import logging

from core import PathLike, TensorF, tensor_read, tensor_write
from errors import BehindCameraError, EmptySelectionError, ShapeMismatchError
from models import CameraView

logger = logging.getLogger(__name__)

# Points closer than this to the camera plane cannot be projected
MIN_PROJECT_DEPTH = 1e-6


def mask_path(path: PathLike) -> Path:
    """Sibling file holding the 0/1 validity mask: points.lumt -> points.mask.lumt"""
    path = Path(path)
    return path.with_name(path.stem + ".mask" + path.suffix)


@dataclass(frozen=True)
class DepthMap:
    """Camera-frame z per pixel, 0 where invalid"""

    z: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, order="C")
        if z.ndim != 2:
            raise ShapeMismatchError(f"depth map must be (H, W), got {z.shape}")
        if not np.all(np.isfinite(z)) or np.any(z < 0):
            raise ValueError("depth values must be finite and >= 0")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @property
    def height(self) -> int:
        return self.z.shape[0]

    @property
    def width(self) -> int:
        return self.z.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.z > 0

    @classmethod
    def load(cls, path: PathLike) -> "DepthMap":
        return cls(tensor_read(path).data)

    def save(self, path: PathLike) -> None:
        tensor_write(TensorF(self.z), path)


@dataclass(frozen=True)
class PointMap:
    """World-space points per pixel, (S, H, W, 3), with a boolean validity mask (S, H, W)"""

    points: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, order="C")
        if points.ndim == 3:
            points = points[None]
        if points.ndim != 4 or points.shape[3] != 3:
            raise ShapeMismatchError(f"point map must be (S, H, W, 3), got {points.shape}")
        mask = np.array(self.mask, dtype=bool)
        if mask.size != int(np.prod(points.shape[:3])):
            raise ShapeMismatchError(f"mask {mask.shape} does not match points {points.shape}")
        mask = mask.reshape(points.shape[:3])
        # invalid entries may hold anything; zero them so reductions never see NaN
        points = np.where(mask[..., None], points, 0.0).astype(points.dtype)
        if not np.all(np.isfinite(points)):
            raise ValueError("point map contains non-finite values")
        points.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.points.shape[:3]

    @property
    def views(self) -> int:
        return self.points.shape[0]

    def view(self, s: int) -> "PointMap":
        return PointMap(self.points[s:s + 1], self.mask[s:s + 1])

    def with_mask(self, mask: np.ndarray) -> "PointMap":
        return PointMap(self.points, self.mask & np.asarray(mask, dtype=bool).reshape(self.shape))

    @classmethod
    def stack(cls, maps) -> "PointMap":
        maps = list(maps)
        return cls(
            np.concatenate([m.points for m in maps], axis=0),
            np.concatenate([m.mask for m in maps], axis=0),
        )

    @classmethod
    def load(cls, path: PathLike) -> "PointMap":
        points = tensor_read(path).data
        if points.ndim == 3:
            points = points[None]
        sibling = mask_path(path)
        if sibling.exists():
            mask = tensor_read(sibling).data.reshape(points.shape[:3]) > 0.5
        else:
            mask = np.ones(points.shape[:3], dtype=bool)
        return cls(points, mask)

    def save(self, path: PathLike) -> None:
        tensor_write(TensorF(self.points), path)
        tensor_write(TensorF(self.mask.astype(np.float32)), mask_path(path))
        logger.info(f"Wrote point map {self.points.shape} to {path}")


def pixel_rays(cam: CameraView, dtype=np.float64) -> np.ndarray:
    """Camera-frame rays with unit z through every pixel center, (H, W, 3)"""
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    rays = np.stack([
        (xs + 0.5 - cam.cx) / cam.fx,
        (ys + 0.5 - cam.cy) / cam.fy,
        np.ones(xs.shape),
    ], axis=-1)
    return rays.astype(dtype)


def backproject(depth: DepthMap, cam: CameraView) -> PointMap:
    if depth.z.shape != (cam.height, cam.width):
        raise ShapeMismatchError(f"depth {depth.z.shape} does not match camera {(cam.height, cam.width)}")
    dtype = np.float64 if depth.z.dtype == np.float64 else np.float32
    p_cam = pixel_rays(cam, np.float64) * depth.z[..., None]
    rot, trans = cam.rotation, cam.translation
    world = (p_cam - trans) @ rot
    return PointMap(world.astype(dtype)[None], depth.valid[None])


def backproject_backward(grad_points: np.ndarray, cam: CameraView) -> np.ndarray:
    """d loss / d z for upstream d loss / d points (H, W, 3) of one view"""
    grad_points = np.asarray(grad_points)
    if grad_points.shape != (cam.height, cam.width, 3):
        raise ShapeMismatchError(f"point gradient {grad_points.shape} does not match camera")
    g_cam = grad_points @ cam.rotation.T.astype(grad_points.dtype)
    return np.sum(g_cam * pixel_rays(cam, grad_points.dtype), axis=-1)


def project(point: np.ndarray, cam: CameraView) -> Tuple[float, float, float]:
    p = cam.rotation @ np.asarray(point, dtype=np.float64).reshape(3) + cam.translation
    if p[2] <= MIN_PROJECT_DEPTH:
        raise BehindCameraError(f"point at camera depth {p[2]:.3g} is behind the camera")
    return (
        float(cam.fx * p[0] / p[2] + cam.cx),
        float(cam.fy * p[1] / p[2] + cam.cy),
        float(p[2]),
    )


def project_points(points: np.ndarray, cam: CameraView) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized project(): (uv (N, 2), z (N,), in_front (N,)); behind-camera rows are NaN"""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3) @ cam.rotation.T + cam.translation
    in_front = p[:, 2] > MIN_PROJECT_DEPTH
    z = np.where(in_front, p[:, 2], np.nan)
    uv = np.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy], axis=1)
    return uv, z, in_front


def downsample_points(points: PointMap, factor: int) -> PointMap:
    """Nearest-neighbour downsampling matching a ceil-halved feature level"""
    if factor == 1:
        return points
    s, h, w = points.shape
    rows = np.minimum(np.arange(-(-h // factor)) * factor + factor // 2, h - 1)
    cols = np.minimum(np.arange(-(-w // factor)) * factor + factor // 2, w - 1)
    return PointMap(
        points.points[:, rows][:, :, cols],
        points.mask[:, rows][:, :, cols],
    )


def distill_loss(student: PointMap, teacher: PointMap) -> Tuple[float, np.ndarray]:
    """Mean per-site l1 distance between point maps, and its gradient wrt the student points.

    Sites masked in either map are excluded; normalization counts sites, not coordinates.
    """
    if student.points.shape != teacher.points.shape:
        raise ShapeMismatchError(f"point maps differ: {student.points.shape} vs {teacher.points.shape}")
    valid = student.mask & teacher.mask
    count = int(valid.sum())
    if count == 0:
        raise EmptySelectionError("no valid pixel sites for distillation")
    diff = np.where(valid[..., None], student.points.astype(np.float64) - teacher.points, 0.0)
    loss = float(np.abs(diff).sum() / count)
    grad = np.sign(diff) / count
    return loss, grad.astype(student.points.dtype)
