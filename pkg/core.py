"""Shared containers and file formats: LUMT tensors, sRGB PNGs, splat PLYs, camera JSON."""
from dataclasses import dataclass, replace
from typing import List, Sequence, Union
from pathlib import Path
from plyfile import PlyData, PlyElement
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError
import numpy as np
import logging
import math
import struct
import json

from errors import (
    BadMagicError, CameraFormatError, ConfigError, DtypeMismatchError, EmptySceneError,
    ImageDecodeError, ImageFormatError, PlyFormatError, TruncatedFileError,
    UnsupportedVersionError, ZeroRankError,
)
from models import CameraView

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LUMT_MAGIC = b"LUMT"
LUMT_VERSION = 1
LUMT_DTYPE_F32 = 0
_HEADER = struct.Struct("<4sBBB")

MAX_SH_DEGREE = 3
QUAT_TOL = 1e-6


# ---------------------------------------------------------------------------
# Raw tensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TensorF:
    """Row-major float32 tensor, innermost dimension last."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim == 0:
            raise ZeroRankError("zero-rank tensor rejected")
        if not np.all(np.isfinite(data)):
            raise ValueError("tensor contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> List[int]:
        return list(self.data.shape)


def tensor_write(t: TensorF, path: PathLike) -> None:
    dims = t.dims
    if not dims:
        raise ZeroRankError("zero-rank tensor rejected")
    header = _HEADER.pack(LUMT_MAGIC, LUMT_VERSION, LUMT_DTYPE_F32, len(dims))
    header += struct.pack(f"<{len(dims)}Q", *dims)
    payload = t.data.astype("<f4", copy=False).tobytes(order="C")
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        logger.error(f"Failed to write tensor {path}: {e}")
        raise


def tensor_read(path: PathLike) -> TensorF:
    with open(path, "rb") as f:
        blob = f.read()

    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    magic, version, dtype, rank = _HEADER.unpack_from(blob, 0)
    if magic != LUMT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != LUMT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    if dtype != LUMT_DTYPE_F32:
        raise DtypeMismatchError(f"{path}: dtype code {dtype}, expected f32")
    if rank == 0:
        raise ZeroRankError("zero-rank tensor rejected")

    offset = _HEADER.size
    if len(blob) < offset + 8 * rank:
        raise TruncatedFileError(f"{path}: dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank

    count = math.prod(dims)
    if len(blob) < offset + 4 * count:
        raise TruncatedFileError(f"{path}: payload holds {(len(blob) - offset) // 4} of {count} values")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(dims)
    return TensorF(data.astype(np.float32))


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageLinear:
    """Linear-light RGB image, (height, width, 3), values >= 0."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.dtype != np.float64:
            pixels = pixels.astype(np.float32)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("image contains non-finite values")
        if np.any(pixels < 0):
            raise ValueError("linear image values must be >= 0")
        pixels = np.array(pixels, order="C")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def srgb_to_linear(encoded: np.ndarray) -> np.ndarray:
    """IEC 61966-2-1 EOTF on values in [0, 1]"""
    c = np.asarray(encoded, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(linear: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(v <= 0.0031308, v * 12.92, 1.055 * np.power(v, 1.0 / 2.4) - 0.055)


def encode_srgb8(linear: np.ndarray) -> np.ndarray:
    """Clamp, apply the OETF and quantize round-half-up to 8-bit codes"""
    return np.floor(linear_to_srgb(linear) * 255.0 + 0.5).astype(np.uint8)


def decode_srgb8(codes: np.ndarray) -> np.ndarray:
    return srgb_to_linear(np.asarray(codes, dtype=np.float64) / 255.0)


def image_load(path: PathLike) -> ImageLinear:
    """8-bit sRGB PNG to linear light; other bit depths and modes are rejected"""
    try:
        with Image.open(path) as im:
            # Pillow narrows 16-bit samples on load; the raw mode still carries the stored depth
            rawmode = im.tile[0][3] if im.tile else im.mode
            if im.format != "PNG" or im.mode != "RGB" or rawmode != "RGB":
                raise ImageFormatError(f"{path}: expected 8-bit RGB PNG, got {im.format} {im.mode} ({rawmode})")
            im.load()
            codes = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, SyntaxError, OSError) as e:
        logger.error(f"Failed to decode {path}: {e}")
        raise ImageDecodeError(f"{path}: {e}") from e
    return ImageLinear(decode_srgb8(codes).astype(np.float32))


def image_save(img: Union[ImageLinear, np.ndarray], path: PathLike) -> None:
    pixels = img.pixels if isinstance(img, ImageLinear) else np.asarray(img)
    try:
        Image.fromarray(encode_srgb8(pixels), mode="RGB").save(path, format="PNG")
    except OSError as e:
        logger.error(f"Failed to write image {path}: {e}")
        raise


def list_pngs(directory: PathLike) -> List[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions, (..., 4) -> (..., 3, 3)"""
    w, x, y, z = np.moveaxis(np.asarray(q), -1, 0)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return np.stack(rows, axis=-1).reshape(np.shape(q)[:-1] + (3, 3))


def rotmat_to_quat(rot: np.ndarray) -> np.ndarray:
    m = np.asarray(rot, dtype=np.float64)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = 2.0 * np.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def normalize_quats(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Gaussian scenes
# ---------------------------------------------------------------------------

def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def _check_primitive_fields(opacity, rotation, scale, what: str) -> None:
    if np.any(opacity < 0) or np.any(opacity > 1):
        raise ValueError(f"{what}: opacity outside [0, 1]")
    if np.any(scale <= 0):
        raise ValueError(f"{what}: scale components must be positive")
    if np.any(np.abs(np.linalg.norm(rotation, axis=-1) - 1.0) > QUAT_TOL):
        raise ValueError(f"{what}: rotation is not a unit quaternion")


@dataclass(frozen=True)
class GaussianPrimitive:
    center: np.ndarray
    opacity: float
    rotation: np.ndarray
    scale: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "opacity", float(self.opacity))
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.ndim != 2 or sh.shape[1] != 3 or sh.shape[0] not in (1, 4, 9, 16):
            raise ValueError(f"sh must be (K, 3) with K in 1, 4, 9, 16; got {sh.shape}")
        object.__setattr__(self, "sh", sh)
        _check_primitive_fields(np.asarray(self.opacity), self.rotation, self.scale, "primitive")

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[0]))) - 1


@dataclass(frozen=True)
class GaussianScene:
    """Ordered Gaussian primitives stored as parallel arrays.

    centers (N, 3), opacities (N,), rotations (N, 4) as (w, x, y, z),
    scales (N, 3) standard deviations, sh (N, (degree+1)^2, 3).
    """

    centers: np.ndarray
    opacities: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    sh: np.ndarray
    sh_degree: int = 0

    def __post_init__(self):
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise ValueError(f"sh_degree must be in [0, {MAX_SH_DEGREE}], got {self.sh_degree}")
        dtype = np.float64 if np.asarray(self.centers).dtype == np.float64 else np.float32
        n = np.asarray(self.centers).reshape(-1, 3).shape[0]
        k = sh_coeff_count(self.sh_degree)
        shapes = {
            "centers": (n, 3), "opacities": (n,), "rotations": (n, 4),
            "scales": (n, 3), "sh": (n, k, 3),
        }
        for name, shape in shapes.items():
            arr = np.array(getattr(self, name), dtype=dtype).reshape(shape) if n else np.zeros(shape, dtype=dtype)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        _check_primitive_fields(self.opacities, self.rotations, self.scales, "scene")

    @classmethod
    def empty(cls, sh_degree: int = 0, dtype=np.float32) -> "GaussianScene":
        k = sh_coeff_count(sh_degree)
        return cls(
            centers=np.zeros((0, 3), dtype), opacities=np.zeros(0, dtype),
            rotations=np.zeros((0, 4), dtype), scales=np.zeros((0, 3), dtype),
            sh=np.zeros((0, k, 3), dtype), sh_degree=sh_degree,
        )

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive], dtype=np.float32) -> "GaussianScene":
        if not primitives:
            return cls.empty(dtype=dtype)
        degrees = {p.sh_degree for p in primitives}
        if len(degrees) != 1:
            raise ValueError(f"primitives mix sh degrees {sorted(degrees)}")
        return cls(
            centers=np.stack([p.center for p in primitives]).astype(dtype),
            opacities=np.array([p.opacity for p in primitives], dtype=dtype),
            rotations=np.stack([p.rotation for p in primitives]).astype(dtype),
            scales=np.stack([p.scale for p in primitives]).astype(dtype),
            sh=np.stack([p.sh for p in primitives]).astype(dtype),
            sh_degree=degrees.pop(),
        )

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=self.centers[i], opacity=self.opacities[i], rotation=self.rotations[i],
            scale=self.scales[i], sh=self.sh[i],
        )

    @property
    def primitives(self) -> List[GaussianPrimitive]:
        return [self[i] for i in range(len(self))]

    @property
    def dtype(self) -> np.dtype:
        return self.centers.dtype

    def astype(self, dtype) -> "GaussianScene":
        return replace(
            self,
            centers=self.centers.astype(dtype), opacities=self.opacities.astype(dtype),
            rotations=self.rotations.astype(dtype), scales=self.scales.astype(dtype),
            sh=self.sh.astype(dtype),
        )

    def with_params(self, **params: np.ndarray) -> "GaussianScene":
        return replace(self, **params)

    def transformed(self, transform: np.ndarray) -> "GaussianScene":
        """Apply a rigid 4x4 world transform to centers and orientations"""
        transform = np.asarray(transform, dtype=np.float64)
        rot, trans = transform[:3, :3], transform[:3, 3]
        q = quat_multiply(rotmat_to_quat(rot)[None, :], self.rotations.astype(np.float64))
        return replace(
            self,
            centers=(self.centers.astype(np.float64) @ rot.T + trans).astype(self.dtype),
            rotations=normalize_quats(q).astype(self.dtype),
        )


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_OPACITY_EPS = 1e-7


def _ply_property_names(sh_degree: int) -> List[str]:
    names = ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2"]
    n_rest = 3 * (sh_coeff_count(sh_degree) - 1)
    return names + [f"f_rest_{i}" for i in range(n_rest)]


def ply_write(scene: GaussianScene, path: PathLike) -> None:
    if len(scene) == 0:
        raise EmptySceneError("refusing to write an empty scene")

    n = len(scene)
    k = sh_coeff_count(scene.sh_degree)
    names = _ply_property_names(scene.sh_degree)
    opacity = np.clip(scene.opacities.astype(np.float64), _OPACITY_EPS, 1.0 - _OPACITY_EPS)

    columns = [
        scene.centers[:, 0], scene.centers[:, 1], scene.centers[:, 2],
        np.log(opacity / (1.0 - opacity)),
        *np.log(scene.scales.astype(np.float64)).T,
        *scene.rotations.T,
        *scene.sh[:, 0, :].T,
    ]
    # f_rest is channel-major: all red coefficients, then green, then blue
    rest = np.transpose(scene.sh[:, 1:, :], (0, 2, 1)).reshape(n, 3 * (k - 1))
    columns.extend(rest.T)

    vertices = np.empty(n, dtype=[(name, "<f4") for name in names])
    for name, column in zip(names, columns):
        vertices[name] = column
    try:
        PlyData([PlyElement.describe(vertices, "vertex")], text=False, byte_order="<").write(str(path))
    except OSError as e:
        logger.error(f"Failed to write PLY {path}: {e}")
        raise
    logger.info(f"Wrote {n} primitives to {path}")


def ply_read(path: PathLike) -> GaussianScene:
    try:
        ply = PlyData.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as e:
        logger.error(f"Failed to parse PLY {path}: {e}")
        raise PlyFormatError(f"{path}: {e}") from e

    if "vertex" not in [el.name for el in ply.elements]:
        raise PlyFormatError(f"{path}: no vertex element")
    data = ply["vertex"].data
    names = set(data.dtype.names)

    n_rest = sum(1 for name in names if name.startswith("f_rest_"))
    k = n_rest // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if n_rest % 3 or sh_coeff_count(degree) != k or degree > MAX_SH_DEGREE:
        raise PlyFormatError(f"{path}: {n_rest} f_rest properties match no SH degree <= {MAX_SH_DEGREE}")
    missing = [name for name in _ply_property_names(degree) if name not in names]
    if missing:
        raise PlyFormatError(f"{path}: missing properties {missing}")

    def col(name: str) -> np.ndarray:
        return np.asarray(data[name], dtype=np.float64)

    n = len(data)
    rest = np.stack([col(f"f_rest_{i}") for i in range(n_rest)], axis=1) if n_rest else np.zeros((n, 0))
    sh = np.concatenate([
        np.stack([col(f"f_dc_{c}") for c in range(3)], axis=1)[:, None, :],
        np.transpose(rest.reshape(n, 3, k - 1), (0, 2, 1)),
    ], axis=1)
    rotations = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)

    scene = GaussianScene(
        centers=np.stack([col("x"), col("y"), col("z")], axis=1).astype(np.float32),
        opacities=(1.0 / (1.0 + np.exp(-col("opacity")))).astype(np.float32),
        rotations=normalize_quats(rotations).astype(np.float32),
        scales=np.exp(np.stack([col(f"scale_{i}") for i in range(3)], axis=1)).astype(np.float32),
        sh=sh.astype(np.float32),
        sh_degree=degree,
    )
    logger.info(f"Read {n} primitives (sh degree {degree}) from {path}")
    return scene


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

def read_cameras(path: PathLike) -> List[CameraView]:
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"Invalid camera JSON {path}: {e}")
        raise CameraFormatError(f"{path}: {e}") from e
    if not isinstance(raw, list) or not raw:
        raise CameraFormatError(f"{path}: expected a non-empty array of views")
    try:
        return [CameraView.model_validate(view) for view in raw]
    except ValidationError as e:
        raise CameraFormatError(f"{path}: {e}") from e


def write_cameras(views: Sequence[CameraView], path: PathLike) -> None:
    with open(path, "w") as f:
        json.dump([view.to_json() for view in views], f, indent=2)


# ---------------------------------------------------------------------------
# Loss weights
# ---------------------------------------------------------------------------

def normalized_weights(weights: Sequence[float], what: str) -> np.ndarray:
    """Scale weights to sum to 1, warning when they did not already"""
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if np.any(w < 0) or total <= 0:
        raise ConfigError(f"{what} weights must be non-negative with a positive sum, got {list(w)}")
    if abs(total - 1.0) > 1e-9:
        logger.warning(f"{what} weights sum to {total:.6g}, renormalizing")
        w = w / total
    return w
