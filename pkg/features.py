"""Five-level feature pyramids for the content and voxel losses, with exact input adjoints."""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union
from pathlib import Path
from numpy.lib.stride_tricks import sliding_window_view
import numpy as np
import logging
import json

from core import ImageLinear, normalized_weights, tensor_read
from errors import ConfigError, ShapeMismatchError
from models import ExtractorSpec

logger = logging.getLogger(__name__)

LEVELS = 5
LUMA = np.array([0.2126, 0.7152, 0.0722])
# Keeps the local-std channel differentiable on flat patches
STD_EPS = 1e-6


@dataclass(frozen=True)
class FeaturePyramid:
    """levels[i] is an (H_i, W_i, C_i) map at stride 2^i"""

    levels: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.levels) != LEVELS:
            raise ShapeMismatchError(f"pyramid needs {LEVELS} levels, got {len(self.levels)}")
        object.__setattr__(self, "levels", tuple(np.asarray(level) for level in self.levels))

    def __getitem__(self, i: int) -> np.ndarray:
        return self.levels[i]

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [level.shape for level in self.levels]


def level_shape(height: int, width: int, level: int) -> Tuple[int, int]:
    for _ in range(level):
        height, width = -(-height // 2), -(-width // 2)
    return height, width


# ---------------------------------------------------------------------------
# Edge-padded stencils and their adjoints
# ---------------------------------------------------------------------------

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    widths = [(p, p), (p, p)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, widths, mode="edge")


def _fold_pad(g: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of _pad: border gradients land on the replicated edge pixels"""
    if p == 0:
        return g
    g = g.copy()
    g[p] += g[:p].sum(axis=0)
    g[-p - 1] += g[-p:].sum(axis=0)
    g = g[p:-p]
    g[:, p] += g[:, :p].sum(axis=1)
    g[:, -p - 1] += g[:, -p:].sum(axis=1)
    return g[:, p:-p]


def _gradients(lum: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    lp = _pad(lum, 1)
    gx = 0.5 * (lp[1:-1, 2:] - lp[1:-1, :-2])
    gy = 0.5 * (lp[2:, 1:-1] - lp[:-2, 1:-1])
    return gx, gy


def _gradients_adjoint(g_gx: np.ndarray, g_gy: np.ndarray) -> np.ndarray:
    h, w = g_gx.shape
    gp = np.zeros((h + 2, w + 2), dtype=g_gx.dtype)
    gp[1:-1, 2:] += 0.5 * g_gx
    gp[1:-1, :-2] -= 0.5 * g_gx
    gp[2:, 1:-1] += 0.5 * g_gy
    gp[:-2, 1:-1] -= 0.5 * g_gy
    return _fold_pad(gp, 1)


def _box3(x: np.ndarray) -> np.ndarray:
    xp = _pad(x, 1)
    h, w = x.shape[:2]
    return sum(xp[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)) / 9.0


def _box3_adjoint(g: np.ndarray) -> np.ndarray:
    h, w = g.shape[:2]
    gp = np.zeros((h + 2, w + 2) + g.shape[2:], dtype=g.dtype)
    for dy in range(3):
        for dx in range(3):
            gp[dy:dy + h, dx:dx + w] += g / 9.0
    return _fold_pad(gp, 1)


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x average pooling with ceil output size; odd edges are replicated first"""
    h, w = x.shape[:2]
    xp = np.pad(x, [(0, h % 2), (0, w % 2)] + [(0, 0)] * (x.ndim - 2), mode="edge")
    return 0.25 * (xp[0::2, 0::2] + xp[1::2, 0::2] + xp[0::2, 1::2] + xp[1::2, 1::2])


def avgpool2_adjoint(g: np.ndarray, height: int, width: int) -> np.ndarray:
    up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
    if height % 2:
        up[height - 1] += up[height]
    if width % 2:
        up[:, width - 1] += up[:, width]
    return up[:height, :width]


def _local_std(lum: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    m1 = _box3(lum)
    m2 = _box3(lum * lum)
    raw = m2 - m1 * m1
    var = np.maximum(raw, 0.0)
    return np.sqrt(var + STD_EPS) - np.sqrt(STD_EPS), m1, raw


def _local_std_adjoint(lum: np.ndarray, g_std: np.ndarray) -> np.ndarray:
    _, m1, raw = _local_std(lum)
    g_var = np.where(raw > 0.0, g_std / (2.0 * np.sqrt(np.maximum(raw, 0.0) + STD_EPS)), 0.0)
    return _box3_adjoint(g_var) * 2.0 * lum + _box3_adjoint(-2.0 * m1 * g_var)


# ---------------------------------------------------------------------------
# Extractors
# ---------------------------------------------------------------------------

class FixedPyramid:
    """Training-free pyramid: luminance, x/y central differences and 3x3 local std per level"""

    channels = 4

    def _luminance_levels(self, pixels: np.ndarray) -> List[np.ndarray]:
        lum = pixels @ LUMA.astype(pixels.dtype)
        out = [lum]
        for _ in range(LEVELS - 1):
            out.append(avgpool2(out[-1]))
        return out

    def extract(self, img: ImageLinear) -> FeaturePyramid:
        levels = []
        for lum in self._luminance_levels(img.pixels):
            gx, gy = _gradients(lum)
            std = _local_std(lum)[0]
            levels.append(np.stack([lum, gx, gy, std], axis=-1))
        return FeaturePyramid(tuple(levels))

    def backward(self, img: ImageLinear, grads: Sequence[Optional[np.ndarray]]) -> np.ndarray:
        """d loss / d pixels given per-level feature gradients (None for untouched levels)"""
        lums = self._luminance_levels(img.pixels)
        carry = None
        for i in reversed(range(LEVELS)):
            lum = lums[i]
            g_lum = np.zeros_like(lum) if carry is None else carry
            g = grads[i] if i < len(grads) else None
            if g is not None:
                g_lum = g_lum + g[..., 0] + _gradients_adjoint(g[..., 1], g[..., 2])
                g_lum = g_lum + _local_std_adjoint(lum, g[..., 3])
            if i > 0:
                carry = avgpool2_adjoint(g_lum, *lums[i - 1].shape)
            else:
                carry = g_lum
        return carry[..., None] * LUMA.astype(carry.dtype)


def _conv(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    k = kernel.shape[-1]
    windows = sliding_window_view(_pad(x, k // 2), (k, k), axis=(0, 1))
    out = np.einsum("hwcij,ocij->hwo", windows, kernel)
    return out if bias is None else out + bias


def _conv_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel.shape[-1]
    h, w = g.shape[:2]
    p = k // 2
    gp = np.zeros((h + 2 * p, w + 2 * p, kernel.shape[1]), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gp[i:i + h, j:j + w] += g @ kernel[:, :, i, j]
    return _fold_pad(gp, p)


class ConvPyramid:
    """Externally supplied conv stack: level i = relu(conv_i(avgpool(level i-1))), level 1 reads RGB"""

    def __init__(self, kernels: Sequence[np.ndarray], biases: Sequence[Optional[np.ndarray]]):
        if len(kernels) != LEVELS:
            raise ConfigError(f"expected {LEVELS} kernels, got {len(kernels)}")
        c_in = 3
        for i, kernel in enumerate(kernels, start=1):
            if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
                raise ConfigError(f"level{i} kernel must be (C_out, C_in, k, k) with odd k, got {kernel.shape}")
            if kernel.shape[1] != c_in:
                raise ConfigError(f"level{i} kernel expects {kernel.shape[1]} input channels, previous level gives {c_in}")
            c_in = kernel.shape[0]
        self.kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
        self.biases = [None if b is None else np.asarray(b, dtype=np.float64).reshape(-1) for b in biases]

    @classmethod
    def from_manifest(cls, path: Union[str, Path]) -> "ConvPyramid":
        """Manifest JSON maps level1..level5 (and optional levelN_bias) to LUMT files beside it"""
        path = Path(path)
        try:
            with open(path, "r") as f:
                manifest = json.load(f)
        except json.JSONDecodeError as e:
            logger.error(f"Invalid weight manifest {path}: {e}")
            raise ConfigError(f"{path}: {e}") from e
        missing = [f"level{i}" for i in range(1, LEVELS + 1) if f"level{i}" not in manifest]
        if missing:
            raise ConfigError(f"{path}: manifest lacks {missing}")
        kernels, biases = [], []
        for i in range(1, LEVELS + 1):
            kernels.append(tensor_read(path.parent / manifest[f"level{i}"]).data)
            bias = manifest.get(f"level{i}_bias")
            biases.append(None if bias is None else tensor_read(path.parent / bias).data)
        logger.info(f"Loaded {LEVELS} conv levels from {path}")
        return cls(kernels, biases)

    def _forward(self, pixels: np.ndarray):
        x = pixels.astype(np.float64)
        inputs, pre = [], []
        for i, (kernel, bias) in enumerate(zip(self.kernels, self.biases)):
            if i > 0:
                x = avgpool2(x)
            inputs.append(x)
            z = _conv(x, kernel, bias)
            pre.append(z)
            x = np.maximum(z, 0.0)
        return inputs, pre

    def extract(self, img: ImageLinear) -> FeaturePyramid:
        _, pre = self._forward(img.pixels)
        return FeaturePyramid(tuple(np.maximum(z, 0.0).astype(img.pixels.dtype) for z in pre))

    def backward(self, img: ImageLinear, grads: Sequence[Optional[np.ndarray]]) -> np.ndarray:
        inputs, pre = self._forward(img.pixels)
        carry = None
        for i in reversed(range(LEVELS)):
            g_out = np.zeros_like(pre[i]) if carry is None else carry
            g = grads[i] if i < len(grads) else None
            if g is not None:
                g_out = g_out + g
            g_in = _conv_adjoint(np.where(pre[i] > 0.0, g_out, 0.0), self.kernels[i])
            if i > 0:
                carry = avgpool2_adjoint(g_in, *inputs[i - 1].shape[:2])
            else:
                carry = g_in
        return carry.astype(img.pixels.dtype)


Extractor = Union[FixedPyramid, ConvPyramid]


def build_extractor(spec: Optional[ExtractorSpec] = None) -> Extractor:
    spec = spec or ExtractorSpec()
    if spec.kind == "external_weights":
        return ConvPyramid.from_manifest(spec.weight_path)
    return FixedPyramid()


def extract(img: ImageLinear, spec: Optional[ExtractorSpec] = None) -> FeaturePyramid:
    return build_extractor(spec).extract(img)


# ---------------------------------------------------------------------------
# Content loss
# ---------------------------------------------------------------------------

def content_loss(
    restored: Union[FeaturePyramid, Sequence[FeaturePyramid]],
    clean: Union[FeaturePyramid, Sequence[FeaturePyramid]],
    weights: Sequence[float] = (0.5, 0.5),
) -> Tuple[float, List[List[Optional[np.ndarray]]]]:
    """Per-site l1 over channels on the two deepest levels, averaged over every site of every view.

    Returns the loss and per view a list of per-level gradients wrt the restored features.
    """
    if isinstance(restored, FeaturePyramid):
        restored = [restored]
    if isinstance(clean, FeaturePyramid):
        clean = [clean]
    if len(restored) != len(clean):
        raise ShapeMismatchError(f"{len(restored)} restored pyramids vs {len(clean)} clean")
    w = normalized_weights(weights, "content")
    deep = list(range(LEVELS - len(w), LEVELS))

    loss = 0.0
    grads: List[List[Optional[np.ndarray]]] = [[None] * LEVELS for _ in restored]
    for wi, level in zip(w, deep):
        sites = 0
        for r, c in zip(restored, clean):
            if r[level].shape != c[level].shape:
                raise ShapeMismatchError(f"level {level + 1} shapes differ: {r[level].shape} vs {c[level].shape}")
            sites += r[level].shape[0] * r[level].shape[1]
        for v, (r, c) in enumerate(zip(restored, clean)):
            diff = r[level].astype(np.float64) - c[level]
            loss += wi * np.abs(diff).sum() / sites
            grads[v][level] = wi * np.sign(diff) / sites
    return float(loss), grads
