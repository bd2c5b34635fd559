"""Voxel pooling of per-pixel features and the multi-scale mean/std alignment loss."""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
import logging

from core import normalized_weights
from errors import ConfigError, EmptySelectionError, ShapeMismatchError
from geometry import PointMap

logger = logging.getLogger(__name__)

STATS_EPS = 1e-8
VOXEL_LEVELS = 5
# Base voxel edge as a fraction of the scene bounding-box diagonal
BASE_VOXEL_FRACTION = 1.0 / 64.0


@dataclass(frozen=True)
class VoxelGrid:
    """Occupied cells in sorted key order.

    keys (M, 3) integer cell indices, features (M, C) member means, counts (M,).
    members maps every contributing point (in flattened valid order) to its cell,
    and sources holds the flat position of those points in the input layout.
    """

    voxel_size: float
    origin: np.ndarray
    keys: np.ndarray
    features: np.ndarray
    counts: np.ndarray
    members: np.ndarray
    sources: np.ndarray
    input_shape: Tuple[int, ...]

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def cells(self) -> Dict[Tuple[int, int, int], Tuple[np.ndarray, int]]:
        return {
            tuple(int(k) for k in key): (feat, int(count))
            for key, feat, count in zip(self.keys, self.features, self.counts)
        }


@dataclass(frozen=True)
class VoxelStats:
    mu: np.ndarray
    sigma: np.ndarray
    scale: int = 1


def default_voxel_sizes(bbox_min: np.ndarray, bbox_max: np.ndarray, levels: int = VOXEL_LEVELS) -> List[float]:
    """v0 * 2^(i-1) for i = 1..levels, with v0 a 64th of the box diagonal"""
    diag = float(np.linalg.norm(np.asarray(bbox_max, dtype=np.float64) - np.asarray(bbox_min, dtype=np.float64)))
    if diag <= 0:
        raise ConfigError("bounding box is degenerate, cannot derive voxel sizes")
    base = diag * BASE_VOXEL_FRACTION
    return [base * 2.0 ** i for i in range(levels)]


def _flatten_inputs(points, feats, mask):
    if isinstance(points, PointMap):
        pts = points.points.reshape(-1, 3)
        valid = points.mask.reshape(-1)
        lead = points.shape
    else:
        pts = np.asarray(points).reshape(-1, 3)
        valid = np.ones(pts.shape[0], dtype=bool)
        lead = (pts.shape[0],)
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool).reshape(-1)
    feats = np.asarray(feats)
    if feats.ndim != len(lead) + 1 or feats.shape[:-1] != tuple(lead):
        raise ShapeMismatchError(f"features {feats.shape} are not aligned with points {tuple(lead)}")
    return pts, feats.reshape(pts.shape[0], -1), valid, tuple(lead) + (feats.shape[-1],)


def voxelize(points, feats, voxel_size: float, origin=(0.0, 0.0, 0.0), mask=None) -> VoxelGrid:
    """Average the features of all points falling into the same cell.

    points is a PointMap (features (S, H, W, C)) or an (N, 3) array (features (N, C)).
    """
    if not voxel_size > 0:
        raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
    pts, flat, valid, input_shape = _flatten_inputs(points, feats, mask)
    sources = np.nonzero(valid)[0]
    if sources.size == 0:
        raise EmptySelectionError("no valid points to voxelize")

    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    cell = np.floor((pts[sources].astype(np.float64) - origin) / voxel_size).astype(np.int64)
    keys, members, counts = np.unique(cell, axis=0, return_inverse=True, return_counts=True)
    members = members.reshape(-1)

    sums = np.zeros((keys.shape[0], flat.shape[1]), dtype=np.float64)
    np.add.at(sums, members, flat[sources])
    features = (sums / counts[:, None]).astype(flat.dtype)
    return VoxelGrid(
        voxel_size=float(voxel_size), origin=origin, keys=keys, features=features,
        counts=counts, members=members, sources=sources, input_shape=input_shape,
    )


def voxelize_backward(grid: VoxelGrid, grad_features: np.ndarray) -> np.ndarray:
    """Scatter d loss / d cell features back onto the input feature layout"""
    grad_features = np.asarray(grad_features)
    if grad_features.shape != grid.features.shape:
        raise ShapeMismatchError(f"cell gradient {grad_features.shape} does not match grid {grid.features.shape}")
    channels = grid.input_shape[-1]
    out = np.zeros((int(np.prod(grid.input_shape[:-1])), channels), dtype=grad_features.dtype)
    out[grid.sources] = grad_features[grid.members] / grid.counts[grid.members][:, None]
    return out.reshape(grid.input_shape)


def voxel_stats(grid: VoxelGrid, scale: int = 1) -> VoxelStats:
    if len(grid) == 0:
        raise EmptySelectionError("voxel grid has no occupied cells")
    feats = grid.features.astype(np.float64)
    mu = feats.mean(axis=0)
    sigma = np.sqrt(((feats - mu) ** 2).mean(axis=0) + STATS_EPS)
    return VoxelStats(mu=mu, sigma=sigma, scale=scale)


def voxel_stats_backward(grid: VoxelGrid, stats: VoxelStats, g_mu: np.ndarray, g_sigma: np.ndarray) -> np.ndarray:
    """d loss / d cell features from gradients wrt channel mean and std"""
    m = len(grid)
    centered = grid.features.astype(np.float64) - stats.mu
    return g_mu / m + g_sigma * centered / (m * stats.sigma)


def voxel_loss(
    restored: Sequence[Optional[VoxelStats]],
    teacher: Sequence[Optional[VoxelStats]],
    weights: Sequence[float],
) -> Tuple[float, List[Optional[Tuple[np.ndarray, np.ndarray]]]]:
    """Weighted l1 between per-scale channel means and stds over the five pooling scales.

    A scale whose grid came out empty on either branch is passed as None; it is dropped
    and the remaining weights are rescaled to sum to 1. Returns the loss and, per scale,
    the gradients wrt the restored (mu, sigma), None for dropped scales.
    """
    if not len(restored) == len(teacher) == len(weights) == VOXEL_LEVELS:
        raise ShapeMismatchError(
            f"voxel loss needs {VOXEL_LEVELS} scales, got restored {len(restored)}, "
            f"teacher {len(teacher)}, weights {len(weights)}"
        )
    w = normalized_weights(weights, "voxel")
    live = np.array([r is not None and t is not None for r, t in zip(restored, teacher)])
    kept = w[live].sum()
    if not kept > 0:
        raise EmptySelectionError("no populated voxel scale carries weight")
    if not live.all():
        logger.debug(f"Dropping empty voxel scales {[i + 1 for i in np.nonzero(~live)[0]]}")
        w = np.where(live, w, 0.0) / kept

    loss = 0.0
    grads: List[Optional[Tuple[np.ndarray, np.ndarray]]] = []
    for wi, alive, r, t in zip(w, live, restored, teacher):
        if not alive:
            grads.append(None)
            continue
        if r.mu.shape != t.mu.shape:
            raise ShapeMismatchError(f"channel counts differ at scale {r.scale}: {r.mu.shape} vs {t.mu.shape}")
        d_mu = r.mu - t.mu
        d_sigma = r.sigma - t.sigma
        loss += wi * (np.abs(d_mu).sum() + np.abs(d_sigma).sum())
        grads.append((wi * np.sign(d_mu), wi * np.sign(d_sigma)))
    return float(loss), grads
