import numpy as np
import pytest

from core import GaussianScene, normalize_quats
from models import CameraView, RenderOptions
from sh import SH_C0
import synth


def make_camera(width=32, height=32, focal=40.0, w2c=None, cx=None, cy=None):
    return CameraView(
        width=width, height=height, fx=focal, fy=focal,
        cx=0.5 * width if cx is None else cx,
        cy=0.5 * height if cy is None else cy,
        w2c=np.eye(4) if w2c is None else w2c,
    )


def make_scene(n, seed=0, sh_degree=1, dtype=np.float64, opacity=(0.3, 0.9)):
    """Splats in front of an identity camera, colors kept away from the clamp at zero"""
    rng = np.random.default_rng(seed)
    centers = np.column_stack([
        rng.uniform(-0.6, 0.6, n), rng.uniform(-0.6, 0.6, n), rng.uniform(3.0, 5.0, n),
    ])
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0] = (rng.uniform(0.25, 0.75, (n, 3)) - 0.5) / SH_C0
    if k > 1:
        sh[:, 1:] = rng.normal(0.0, 0.03, (n, k - 1, 3))
    return GaussianScene(
        centers=centers.astype(dtype),
        opacities=rng.uniform(*opacity, n).astype(dtype),
        rotations=normalize_quats(rng.normal(size=(n, 4))).astype(dtype),
        scales=rng.uniform(0.15, 0.35, (n, 3)).astype(dtype),
        sh=sh.astype(dtype),
        sh_degree=sh_degree,
    )


def random_rigid(seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    transform = np.eye(4)
    transform[:3, :3] = q
    transform[:3, 3] = rng.normal(size=3)
    return transform


@pytest.fixture
def camera():
    return make_camera()


@pytest.fixture
def smooth_opts():
    """No cutoff and no transmittance floor, so the image is smooth in every parameter"""
    return RenderOptions(alpha_cutoff=0.0, transmittance_floor=0.0)


@pytest.fixture
def small_scene():
    return make_scene(8, seed=3)


@pytest.fixture(scope="session")
def tiny_synthetic():
    return synth.build_scene(seed=7, n_primitives=40, n_views=4, width=32, height=32, dtype=np.float64)
