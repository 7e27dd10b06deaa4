import math

import numpy as np
import pytest

from conftest import random_two_unit
from pblsim.geometry import (PointCloud, Pose, RangeImage, SensorIntrinsics, UnitIntrinsics, angles_from_point,
                             column_times, interpolate_pose, pixel_from_angles, project, quat_slerp,
                             quat_to_matrix, ray_from_pixel, sensor_rays, shutter_poses, unproject)


def single(W=1024, H=64, fov=0.4, f0=0.2, z=0.0):
    return SensorIntrinsics.single(W, H, fov, f0, z)


# --- angles_from_point -----------------------------------------------------

def test_angles_on_axis():
    u = UnitIntrinsics(0.4, 0.0, 0.0, 0, 64)
    assert angles_from_point((1, 0, 0), u) == (0.0, 0.0)


def test_angles_y_axis():
    u = UnitIntrinsics(0.4, 0.0, 0.0, 0, 64)
    th, ph = angles_from_point((0, 1, 0), u)
    assert th == 0.0 and ph == pytest.approx(math.pi / 2, abs=1e-15)


def test_angles_with_offsets():
    u = UnitIntrinsics(0.4, 0.1, 0.0, 0, 64)
    th, ph = angles_from_point((1, 0, 1), u, 0.01)
    assert th == pytest.approx(math.pi / 4 + 0.11, abs=1e-15) and ph == 0.0


def test_angles_degenerate():
    u = UnitIntrinsics(0.4, 0.0, 0.5, 0, 64)
    with pytest.raises(ValueError, match="degenerate point"):
        angles_from_point((0, 0, 0.5), u)


# --- pixel_from_angles -----------------------------------------------------

def test_pixel_midpoint():
    intr = single()
    i, j = pixel_from_angles(0.2, 0.0, intr, 0)
    assert (i, j) == (32.0, 512.0)


def test_pixel_upper_edge_rear():
    intr = single()
    i, j = pixel_from_angles(0.4, math.pi, intr, 0)
    assert i == 0.0 and j == 0.0


def test_pixel_substitution():
    intr = single()
    i, j = pixel_from_angles(0.75 * 0.4, -math.pi / 2, intr, 0)
    assert i == pytest.approx(16.0, abs=1e-12) and j == pytest.approx(768.0, abs=1e-12)


def test_pixel_azimuth_periodic(rng):
    intr = single()
    phi = rng.uniform(-math.pi, math.pi, 200)
    _, j0 = pixel_from_angles(np.full(200, 0.1), phi, intr, 0)
    _, j1 = pixel_from_angles(np.full(200, 0.1), phi + 2 * math.pi, intr, 0)
    d = np.abs(j0 - j1)
    assert np.all(np.minimum(d, intr.width - d) < 1e-9)
    assert np.all((j1 >= 0) & (j1 < intr.width))


# --- rays ------------------------------------------------------------------

def test_forward_ray():
    # row 31 center: (1 - 31.5 / 64) * 0.4 - f0 = 0 for f0 = 0.2 + 0.4 * 0.5 / 64
    f0 = 0.2 + 0.4 * 0.5 / 64
    intr = single(f0=f0)
    o, d = ray_from_pixel(31, 511, intr)
    az = (0.5 - 511.5 / 1024) * 2 * math.pi
    assert np.allclose(o, 0.0)
    assert np.allclose(d, [math.cos(az), math.sin(az), 0.0], atol=1e-15)


def test_ray_quarter_azimuth():
    f0 = 0.2 + 0.4 * 0.5 / 64
    # with W = 2 the center of column 0 sits at azimuth (0.5 - 0.25) * 2pi = pi/2
    intr = SensorIntrinsics.single(2, 64, 0.4, f0)
    o, d = ray_from_pixel(31, 0, intr)
    assert np.allclose(d, [0.0, 1.0, 0.0], atol=1e-15)
    assert abs(np.linalg.norm(d) - 1.0) < 1e-15


def test_ray_roundtrip_all_pixels(rng):
    for _ in range(5):
        intr = random_two_unit(rng)
        ii, jj = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
        o, d = ray_from_pixel(ii, jj, intr)
        for k, u in enumerate(intr.units):
            rows = slice(u.row_start, u.row_end)
            p = o[rows] + 7.0 * d[rows]
            th, ph = angles_from_point(p, u, intr.diode_offsets[rows][:, None])
            ic, jc = pixel_from_angles(th, ph, intr, k)
            assert np.abs(ic - (ii[rows] + 0.5)).max() < 1e-9
            assert np.abs(jc - (jj[rows] + 0.5)).max() < 1e-9


def test_ray_out_of_range():
    with pytest.raises(IndexError):
        ray_from_pixel(64, 0, single())


# --- project / unproject ---------------------------------------------------

def test_project_single_point():
    intr = single()
    o, d = ray_from_pixel(10, 100, intr)
    img, stats = project(PointCloud((o + 10.0 * d)[None], [0.3]), intr)
    assert img.valid.sum() == 1
    assert img.depth[10, 100] == pytest.approx(10.0, abs=1e-12)
    assert img.intensity[10, 100] == 0.3
    assert stats.n_written == 1


def test_project_zbuffer():
    intr = single()
    o, d = ray_from_pixel(5, 5, intr)
    pts = np.stack([o + 7.0 * d, o + 5.0 * d])
    img, stats = project(PointCloud(pts, [0.1, 0.2]), intr)
    assert img.depth[5, 5] == pytest.approx(5.0)
    assert img.intensity[5, 5] == 0.2
    assert stats.n_collisions == 1


def test_project_drops_out_of_fov():
    intr = single()
    img, stats = project(PointCloud([[1.0, 0.0, 5.0]], [0.5]), intr)
    assert stats.n_dropped == 1 and not img.valid.any()


def _pixel_center_cloud(rng, intr, with_ring=False):
    o, d = sensor_rays(intr)
    keep = rng.random((intr.height, intr.width)) < 0.7
    r = rng.uniform(1.0, 60.0, keep.sum())
    ii, jj = np.nonzero(keep)
    pts = o[keep] + r[:, None] * d[keep]
    return PointCloud(pts, rng.uniform(0, 1, len(pts)), ii if with_ring else None), keep


def test_unproject_project_roundtrip(rng):
    intr = random_two_unit(rng, 128, 32)
    cloud, keep = _pixel_center_cloud(rng, intr)
    img, stats = project(cloud, intr)
    assert stats.n_written == keep.sum() and stats.n_dropped == 0
    back = unproject(img, intr)
    order = np.lexsort((np.nonzero(keep)[1], np.nonzero(keep)[0]))
    assert np.abs(back.positions - cloud.positions[order]).max() < 1e-4


def test_row_partition(rng):
    intr = random_two_unit(rng, 64, 32)
    cloud, _ = _pixel_center_cloud(rng, intr)
    img, _ = project(cloud, intr)
    back = unproject(img, intr)
    for k, u in enumerate(intr.units):
        mine = intr.unit_of_row[back.ring] == k
        assert np.all((back.ring[mine] >= u.row_start) & (back.ring[mine] < u.row_end))


def test_project_permutation_invariant(rng):
    intr = random_two_unit(rng, 64, 32)
    cloud, _ = _pixel_center_cloud(rng, intr)
    perm = rng.permutation(len(cloud))
    a, _ = project(cloud, intr)
    b, _ = project(PointCloud(cloud.positions[perm], cloud.intensity[perm]), intr)
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.intensity, b.intensity)


def test_unproject_single_pixel():
    intr = single()
    depth = np.zeros((64, 1024))
    depth[3, 7] = 12.5
    c = unproject(RangeImage(depth, np.zeros_like(depth)), intr)
    o, d = ray_from_pixel(3, 7, intr)
    assert len(c) == 1
    assert np.allclose(c.positions[0], o + 12.5 * d)
    assert c.ring[0] == 3 and c.col[0] == 7 and c.time_frac[0] == 7 / 1024


def test_unproject_empty():
    intr = single()
    assert len(unproject(RangeImage.empty(64, 1024), intr)) == 0


# --- pose interpolation ----------------------------------------------------

def _yaw(a):
    return np.array([0, 0, math.sin(a / 2), math.cos(a / 2)])


def test_interpolate_endpoints():
    p0 = Pose([1, 2, 3], _yaw(0.3))
    p1 = Pose([4, 5, 6], _yaw(1.2))
    assert interpolate_pose(p0, p1, 0.0) == p0
    assert interpolate_pose(p0, p1, 1.0) == p1


def test_interpolate_static():
    p = Pose([1, 2, 3], _yaw(0.3))
    for t in (0.1, 0.5, 0.9):
        q = interpolate_pose(p, p, t)
        assert np.allclose(q.translation, p.translation) and np.allclose(q.rotation, p.rotation)


def test_interpolate_midpoint_vs_slerp():
    p0 = Pose([0, 0, 0])
    p1 = Pose([2, 0, 0], _yaw(math.pi / 2))
    m = interpolate_pose(p0, p1, 0.5)
    assert np.allclose(m.translation, [1, 0, 0])
    ref = quat_slerp(p0.rotation, p1.rotation, 0.5)
    ang = 2 * math.acos(min(1.0, abs(float(np.dot(ref, m.rotation)))))
    assert math.degrees(ang) < 0.25
    assert abs(np.linalg.norm(m.rotation) - 1) < 1e-9


def test_interpolate_sign_alignment():
    q = _yaw(0.4)
    p0 = Pose([0, 0, 0], q)
    p1 = Pose([0, 0, 0], -_yaw(0.6))
    m = interpolate_pose(p0, p1, 0.5)
    assert np.allclose(quat_to_matrix(m.rotation), quat_to_matrix(_yaw(0.5)), atol=1e-3)


def test_shutter_single_column():
    p0, p1 = Pose([0, 0, 0]), Pose([2, 0, 0])
    ps = shutter_poses(p0, p1, 1)
    assert len(ps) == 1 and ps[0] == p0


def test_shutter_static():
    p = Pose([1, 1, 0], _yaw(0.2))
    ps = shutter_poses(p, p, 16)
    assert all(np.allclose(q.translation, p.translation) for q in ps)


def test_shutter_midpoint():
    ps = shutter_poses(Pose([0, 0, 0]), Pose([2, 0, 0]), 1024)
    assert np.allclose(ps[512].translation, [1, 0, 0])


def test_shutter_reverse():
    t = column_times(8, reverse=True)
    assert t[0] == 7 / 8 and t[-1] == 0.0


def test_pose_quaternion_normalized():
    p = Pose([0, 0, 0], [0, 0, 2, 0])
    assert abs(np.linalg.norm(p.rotation) - 1) < 1e-9
