import numpy as np
import pytest

from conftest import make_camera, random_rigid
from errors import BehindCameraError, EmptySelectionError, ShapeMismatchError
from geometry import (
    DepthMap, PointMap, backproject, backproject_backward, distill_loss, downsample_points,
    project, project_points,
)


def _posed_camera(seed=0, width=12, height=9):
    w2c = random_rigid(seed)
    return make_camera(width=width, height=height, focal=15.0, w2c=w2c)


def test_principal_point_ray():
    cam = make_camera(width=33, height=33, cx=16.5, cy=16.5)
    z = np.zeros((33, 33))
    z[16, 16] = 2.0
    pm = backproject(DepthMap(z), cam)
    np.testing.assert_allclose(pm.points[0, 16, 16], [0.0, 0.0, 2.0])


def test_pinhole_offset_pixel():
    cam = make_camera(width=200, height=100, focal=100.0, cx=50.0, cy=50.0)
    z = np.ones((100, 200))
    pm = backproject(DepthMap(z), cam)
    np.testing.assert_allclose(pm.points[0, 49, 149], [0.995, -0.005, 1.0])


def test_zero_depth_is_invalid():
    cam = make_camera(width=4, height=3)
    z = np.ones((3, 4))
    z[1, 2] = 0.0
    pm = backproject(DepthMap(z), cam)
    assert not pm.mask[0, 1, 2]
    assert pm.mask.sum() == 11
    np.testing.assert_array_equal(pm.points[0, 1, 2], 0.0)


def test_depth_map_rejects_negative():
    with pytest.raises(ValueError):
        DepthMap(-np.ones((2, 2)))


def test_project_backproject_roundtrip():
    cam = _posed_camera(1)
    depth = DepthMap(np.random.default_rng(0).uniform(1.0, 4.0, (cam.height, cam.width)))
    pm = backproject(depth, cam)
    uv, z, in_front = project_points(pm.points.reshape(-1, 3), cam)
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    expected = np.stack([xs.reshape(-1) + 0.5, ys.reshape(-1) + 0.5], axis=1)
    assert np.all(in_front)
    np.testing.assert_allclose(uv, expected, atol=1e-4)
    np.testing.assert_allclose(z, depth.z.reshape(-1), atol=1e-9)


def test_project_examples():
    cam = make_camera(width=40, height=30, focal=10.0)
    assert project(np.array([0.0, 0.0, 5.0]), cam) == pytest.approx((cam.cx, cam.cy, 5.0))
    unit = make_camera(width=4, height=4, focal=1.0, cx=0.0, cy=0.0)
    assert project(np.array([2.0, 3.0, 4.0]), unit) == pytest.approx((0.5, 0.75, 4.0))
    with pytest.raises(BehindCameraError):
        project(np.array([1.0, 1.0, 0.0]), unit)


def test_project_points_marks_behind_rows():
    cam = make_camera()
    uv, z, in_front = project_points(np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -1.0]]), cam)
    assert in_front.tolist() == [True, False]
    assert np.all(np.isnan(uv[1]))


def test_backproject_covariant_under_rigid_motion():
    cam = _posed_camera(2)
    transform = random_rigid(5)
    depth = DepthMap(np.random.default_rng(1).uniform(1.0, 3.0, (cam.height, cam.width)))
    base = backproject(depth, cam).points[0]
    moved = backproject(depth, cam.with_pose(cam.w2c @ transform)).points[0]
    inv = np.linalg.inv(transform)
    expected = base @ inv[:3, :3].T + inv[:3, 3]
    np.testing.assert_allclose(moved, expected, atol=1e-9)


def test_backproject_backward_matches_finite_differences():
    cam = _posed_camera(3, width=5, height=4)
    rng = np.random.default_rng(2)
    z = rng.uniform(1.0, 2.0, (4, 5))
    upstream = rng.normal(size=(4, 5, 3))
    analytic = backproject_backward(upstream, cam)
    h = 1e-6
    numeric = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        plus, minus = z.copy(), z.copy()
        plus[idx] += h
        minus[idx] -= h
        f_plus = np.sum(backproject(DepthMap(plus), cam).points[0] * upstream)
        f_minus = np.sum(backproject(DepthMap(minus), cam).points[0] * upstream)
        numeric[idx] = (f_plus - f_minus) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_point_map_save_load(tmp_path):
    rng = np.random.default_rng(3)
    mask = rng.random((2, 3, 4)) > 0.3
    pm = PointMap(rng.normal(size=(2, 3, 4, 3)).astype(np.float32), mask)
    pm.save(tmp_path / "p.lumt")
    assert (tmp_path / "p.mask.lumt").exists()
    back = PointMap.load(tmp_path / "p.lumt")
    np.testing.assert_array_equal(back.mask, mask)
    np.testing.assert_array_equal(back.points, pm.points)


def test_point_map_shape_checked():
    with pytest.raises(ShapeMismatchError):
        PointMap(np.zeros((2, 3, 4, 3)), np.ones((2, 3, 5), dtype=bool))


def test_downsample_points_matches_level_shape():
    pm = PointMap(np.arange(5 * 7 * 3, dtype=np.float64).reshape(1, 5, 7, 3), np.ones((1, 5, 7), dtype=bool))
    half = downsample_points(pm, 2)
    assert half.shape == (1, 3, 4)
    np.testing.assert_array_equal(half.points[0, 1, 1], pm.points[0, 3, 3])
    np.testing.assert_array_equal(half.points[0, 2, 3], pm.points[0, 4, 6])


def test_distill_identical_is_zero():
    rng = np.random.default_rng(4)
    pm = PointMap(rng.normal(size=(2, 3, 3, 3)), np.ones((2, 3, 3), dtype=bool))
    loss, grad = distill_loss(pm, pm)
    assert loss == 0.0
    assert np.all(grad == 0.0)


def test_distill_uniform_offset():
    rng = np.random.default_rng(5)
    teacher = rng.normal(size=(1, 2, 2, 3))
    mask = np.ones((1, 2, 2), dtype=bool)
    loss, _ = distill_loss(PointMap(teacher + 0.1, mask), PointMap(teacher, mask))
    assert loss == pytest.approx(0.3, abs=1e-12)


def test_distill_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    student = rng.normal(size=(1, 3, 3, 3))
    teacher = rng.normal(size=(1, 3, 3, 3))
    mask = rng.random((1, 3, 3)) > 0.2
    _, grad = distill_loss(PointMap(student, mask), PointMap(teacher, np.ones_like(mask)))
    h = 1e-6
    numeric = np.zeros_like(student)
    for idx in np.ndindex(student.shape):
        plus, minus = student.copy(), student.copy()
        plus[idx] += h
        minus[idx] -= h
        f_plus = distill_loss(PointMap(plus, mask), PointMap(teacher, np.ones_like(mask)))[0]
        f_minus = distill_loss(PointMap(minus, mask), PointMap(teacher, np.ones_like(mask)))[0]
        numeric[idx] = (f_plus - f_minus) / (2 * h)
    np.testing.assert_allclose(grad, numeric, atol=1e-4)


def test_distill_matches_brute_force():
    rng = np.random.default_rng(7)
    student = rng.normal(size=(2, 8, 8, 3))
    teacher = rng.normal(size=(2, 8, 8, 3))
    ms = rng.random((2, 8, 8)) > 0.1
    mt = rng.random((2, 8, 8)) > 0.1
    total, count = 0.0, 0
    for s in range(2):
        for i in range(8):
            for j in range(8):
                if ms[s, i, j] and mt[s, i, j]:
                    total += sum(abs(student[s, i, j, c] - teacher[s, i, j, c]) for c in range(3))
                    count += 1
    loss, _ = distill_loss(PointMap(student, ms), PointMap(teacher, mt))
    assert loss == pytest.approx(total / count, abs=1e-9)


def test_distill_empty_selection():
    pm = PointMap(np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 2), dtype=bool))
    with pytest.raises(EmptySelectionError):
        distill_loss(pm, pm)


def test_distill_is_symmetric():
    rng = np.random.default_rng(8)
    mask = rng.random((2, 5, 5)) > 0.3
    p = PointMap(rng.normal(size=(2, 5, 5, 3)), mask)
    q = PointMap(rng.normal(size=(2, 5, 5, 3)), mask)
    assert distill_loss(p, q)[0] == pytest.approx(distill_loss(q, p)[0], abs=1e-12)
