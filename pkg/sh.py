"""Real spherical-harmonic color basis up to degree 3, with direction derivatives."""
from typing import Tuple
import numpy as np

from errors import SHDegreeError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

# Colors are stored relative to mid-gray
COLOR_OFFSET = 0.5


def degree_for_count(k: int) -> int:
    degree = int(round(np.sqrt(k))) - 1
    if (degree + 1) ** 2 != k or degree > 3:
        raise SHDegreeError(f"{k} coefficients do not form an SH basis of degree <= 3")
    return degree


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values (N, (degree+1)^2) at unit directions (N, 3)"""
    if not 0 <= degree <= 3:
        raise SHDegreeError(f"SH degree {degree} not supported")
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        cols += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(cols, axis=1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d dir, shape (N, (degree+1)^2, 3)"""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = SH_C1
        rows += [(zero, zero - c, zero), (zero, zero, zero + c), (zero - c, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (SH_C3[2] * -2.0 * x * y, SH_C3[2] * (4.0 * zz - xx - 3.0 * yy), SH_C3[2] * 8.0 * y * z),
            (SH_C3[3] * -6.0 * x * z, SH_C3[3] * -6.0 * y * z, SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)),
            (SH_C3[4] * (4.0 * zz - 3.0 * xx - yy), SH_C3[4] * -2.0 * x * y, SH_C3[4] * 8.0 * x * z),
            (SH_C3[5] * 2.0 * x * z, SH_C3[5] * -2.0 * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * -6.0 * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=1) for r in rows], axis=1)


def eval_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """RGB from coefficients (N, K, 3) or (K, 3) seen along unit dirs.

    Output is clamped below at 0; no upper clamp.
    """
    single = np.ndim(sh) == 2
    sh = np.asarray(sh)[None] if single else np.asarray(sh)
    dirs = np.asarray(dirs, dtype=sh.dtype).reshape(-1, 3)
    if dirs.shape[0] == 1 and sh.shape[0] > 1:
        dirs = np.repeat(dirs, sh.shape[0], axis=0)
    degree = degree_for_count(sh.shape[1])
    rgb = np.einsum("nk,nkc->nc", sh_basis(dirs, degree), sh) + COLOR_OFFSET
    rgb = np.maximum(rgb, 0.0)
    return rgb[0] if single else rgb


def eval_sh_backward(sh: np.ndarray, dirs: np.ndarray, grad_rgb: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients (d sh (N, K, 3), d dirs (N, 3)) for upstream d rgb (N, 3)"""
    degree = degree_for_count(sh.shape[1])
    basis = sh_basis(dirs, degree)
    raw = np.einsum("nk,nkc->nc", basis, sh) + COLOR_OFFSET
    g = np.where(raw > 0.0, grad_rgb, 0.0)
    grad_sh = basis[:, :, None] * g[:, None, :]
    grad_basis = np.einsum("nkc,nc->nk", sh, g)
    grad_dirs = np.einsum("nk,nkd->nd", grad_basis, sh_basis_grad(dirs, degree))
    return grad_sh, grad_dirs
