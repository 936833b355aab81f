"""Camera model tests: fixed-value projections, projection/ray round trips,
sampling statistics, and the differentiable projection path."""

import numpy as np
import pytest

from dynfield import diffmath as dm
from dynfield import geometry as geo
from dynfield.diffmath import DTensor


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng):
    return geo.Pose(random_rotation(rng), rng.uniform(-2, 2, size=3))


CAM = geo.Intrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0)
IDENT = geo.Pose(np.eye(3), np.zeros(3))


def test_project_optical_axis():
    coord, depth, valid = geo.project_point((0.0, 0.0, 1.0), CAM, IDENT)
    assert (coord.u, coord.v) == (64.0, 64.0)
    assert depth == 1.0 and valid


def test_project_offset_point():
    coord, depth, valid = geo.project_point((0.1, 0.0, 1.0), CAM, IDENT)
    assert coord.u == pytest.approx(74.0)
    assert coord.v == pytest.approx(64.0)
    assert valid


def test_project_behind_camera_flagged():
    _, depth, valid = geo.project_point((0.0, 0.0, -1.0), CAM, IDENT)
    assert not valid and depth == -1.0
    uv, _, mask = geo.project_points(np.array([[0, 0, 1.0], [0, 0, -1.0]]), CAM, IDENT)
    assert mask.tolist() == [True, False]
    assert np.all(np.isfinite(uv))


def test_pose_validation():
    with pytest.raises(ValueError):
        geo.Pose(np.eye(3) * 2.0, np.zeros(3))  # not orthonormal
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        geo.Pose(refl, np.zeros(3))  # det -1
    with pytest.raises(ValueError):
        geo.Intrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0)


def test_ray_validation():
    with pytest.raises(ValueError):
        geo.Ray(np.zeros(3), np.array([0.0, 0.0, 2.0]), 1.0, 2.0)
    with pytest.raises(ValueError):
        geo.Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 2.0, 1.0)


def test_axis_ray_direction():
    cam = geo.Intrinsics(fx=80.0, fy=80.0, cx=32.5, cy=32.5)
    ray = geo.generate_rays(cam, IDENT, (32, 32), (1.0, 2.0))
    np.testing.assert_allclose(ray.direction, [0.0, 0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(ray.origin, [0.0, 0.0, 0.0], atol=1e-15)


def test_ray_origin_is_camera_center():
    rng = np.random.default_rng(101)
    for _ in range(20):
        pose = random_pose(rng)
        ray = geo.generate_rays(CAM, pose, (5, 9), (1.0, 2.0))
        np.testing.assert_allclose(ray.origin, -pose.R.T @ pose.T, atol=1e-12)


def test_projection_ray_round_trip():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        pose = random_pose(rng)
        pixels = rng.integers(0, 128, size=(20, 2))
        origins, dirs = geo.generate_rays_batch(CAM, pose, pixels)
        for t in (1.0, 3.7):
            pts = origins + t * dirs
            uv, _, valid = geo.project_points(pts, CAM, pose)
            assert valid.all()
            err = np.abs(uv - (pixels + 0.5)).max()
            worst = max(worst, err)
    assert worst < 1e-6


def test_round_trip_at_depth_bounds():
    rng = np.random.default_rng(303)
    pose = random_pose(rng)
    ray = geo.generate_rays(CAM, pose, (17, 99), (1.25, 4.0))
    for t in (ray.z_near, ray.z_far):
        coord, _, valid = geo.project_point(ray.origin + t * ray.direction, CAM, pose)
        assert valid
        assert abs(coord.u - 17.5) < 1e-6 and abs(coord.v - 99.5) < 1e-6


def test_stratified_midpoints():
    ray = geo.Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0, 2.0)
    t = geo.stratified_samples(ray, 2, jitter=False)
    np.testing.assert_allclose(t, [1.25, 1.75], atol=1e-15)


def test_jittered_samples_stay_in_bins_and_increase():
    rng = np.random.default_rng(404)
    n = 8
    t = geo.sample_depths(1.0, 2.0, n, 1000, jitter=True, rng=rng)
    delta = 1.0 / n
    lo = 1.0 + np.arange(n) * delta
    assert np.all(t >= lo) and np.all(t < lo + delta)
    assert np.all(np.diff(t, axis=1) > 0)


def test_jittered_mean_approaches_midpoints():
    rng = np.random.default_rng(505)
    n = 8
    t = geo.sample_depths(1.0, 2.0, n, 100_000, jitter=True, rng=rng)
    mids = 1.0 + (np.arange(n) + 0.5) / n
    assert np.abs(t.mean(axis=0) - mids).max() < 1e-2


def test_jitter_requires_rng():
    with pytest.raises(ValueError):
        geo.sample_depths(1.0, 2.0, 4, 2, jitter=True, rng=None)
    with pytest.raises(ValueError):
        geo.sample_depths(1.0, 2.0, 1, 2)


def test_projection_differentiable_in_point():
    dm.set_profile("test")
    rng = np.random.default_rng(606)
    pose = random_pose(rng)
    center = pose.camera_center()
    look = pose.R.T @ np.array([0.0, 0.0, 1.0])
    pts = center + 2.0 * look + 0.1 * rng.standard_normal((6, 3))

    def f(p):
        uv, _ = geo.project_points_diff(p, CAM, pose)
        return uv

    err = dm.grad_check(f, DTensor(pts))
    assert err < 1e-6


def test_diff_projection_matches_plain_path():
    rng = np.random.default_rng(707)
    pose = random_pose(rng)
    center = pose.camera_center()
    look = pose.R.T @ np.array([0.0, 0.0, 1.0])
    pts = center + 2.0 * look + 0.2 * rng.standard_normal((50, 3))
    uv_plain, z_plain, valid = geo.project_points(pts, CAM, pose)
    assert valid.all()
    uv_diff, z_diff = geo.project_points_diff(DTensor(pts), CAM, pose)
    np.testing.assert_allclose(uv_diff.data, uv_plain, atol=1e-9)
    np.testing.assert_allclose(z_diff.data[:, 0], z_plain, atol=1e-12)
