import numpy as np
import pytest
from scipy import ndimage

from core import ply_read, read_cameras
from errors import ConfigError
from geometry import PointMap
import synth


def test_gen_scene_is_deterministic(tmp_path):
    synth.gen_scene(3, 12, tmp_path / "a", n_views=4, width=24, height=24)
    synth.gen_scene(3, 12, tmp_path / "b", n_views=4, width=24, height=24)
    assert (tmp_path / "a" / "scene.ply").read_bytes() == (tmp_path / "b" / "scene.ply").read_bytes()
    for name in synth.view_names(4):
        assert (tmp_path / "a" / "clean" / f"{name}.png").read_bytes() == \
            (tmp_path / "b" / "clean" / f"{name}.png").read_bytes()


def test_gen_scene_outputs(tmp_path):
    written = synth.gen_scene(1, 20, tmp_path, n_views=5, width=24, height=16)
    assert all(p.exists() for p in written)
    views = read_cameras(tmp_path / "cams.json")
    assert len(views) == 5
    assert all((v.width, v.height) == (24, 16) for v in views)
    scene = ply_read(tmp_path / "scene.ply")
    assert len(scene) == 20
    assert np.all(scene.centers >= -1.0) and np.all(scene.centers <= 1.0)
    points = PointMap.load(tmp_path / "teacher_points.lumt")
    assert points.shape == (5, 16, 24)
    assert points.mask.any()


def test_single_primitive_has_one_footprint():
    built = synth.build_scene(seed=5, n_primitives=1, n_views=4, width=32, height=32)
    for out in built.renders:
        _, components = ndimage.label(out.alpha > 0)
        assert components == 1


def test_cameras_look_at_the_centroid():
    built = synth.build_scene(seed=6, n_primitives=30, n_views=8)
    target = built.scene.centers.astype(np.float64).mean(axis=0)
    for cam in built.views:
        p = cam.rotation @ target + cam.translation
        assert p[0] == pytest.approx(0.0, abs=1e-9) and p[1] == pytest.approx(0.0, abs=1e-9)
        assert p[2] > 0.0


def test_teacher_points_lie_near_the_scene():
    built = synth.build_scene(seed=8, n_primitives=40, n_views=4, width=32, height=32)
    valid = built.teacher_points.points[built.teacher_points.mask]
    assert valid.size
    assert np.all(np.abs(valid) < 2.0)


@pytest.mark.parametrize("bbox", [((0, 0, 0), (1, 1, 0)), ((0, 0, 0), (-1, 1, 1))])
def test_invalid_bbox(bbox):
    with pytest.raises(ConfigError):
        synth.random_scene(0, 5, bbox)


def test_ring_size_limits():
    with pytest.raises(ConfigError):
        synth.ring_cameras(np.zeros(3), 3.0, n_views=3)
    with pytest.raises(ConfigError):
        synth.random_scene(0, 0)
