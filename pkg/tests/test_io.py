import math
import struct

import numpy as np
import pytest

from pblsim.field import VoxelField
from pblsim.geometry import PointCloud, Pose, RangeImage, SensorIntrinsics
from pblsim.io import formats as fmt
from pblsim.io.synth import hdl64_like, planted_params


def test_kitti_two_points(tmp_path):
    vals = [1.5, -2.25, 0.125, 0.5, 10.0, 20.0, -1.0, 0.75]
    p = tmp_path / "a.bin"
    p.write_bytes(struct.pack("<8f", *vals))
    assert p.stat().st_size == 32
    c = fmt.read_kitti_bin(p)
    assert np.array_equal(c.positions, [vals[0:3], vals[4:7]])
    assert np.array_equal(c.intensity, [vals[3], vals[7]])


def test_kitti_empty_and_truncated(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert len(fmt.read_kitti_bin(p)) == 0
    p.write_bytes(b"\0" * 17)
    with pytest.raises(ValueError, match="length not multiple of 16.*byte offset 16"):
        fmt.read_kitti_bin(p)


def test_kitti_nan_flagged(tmp_path):
    p = tmp_path / "n.bin"
    p.write_bytes(struct.pack("<8f", math.nan, 0, 0, 0.1, 1, 2, 3, 0.2))
    c = fmt.read_kitti_bin(p)
    assert len(c) == 2 and list(c.finite) == [False, True]


def test_kitti_round_trip_order(tmp_path, rng):
    pos = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
    inten = rng.uniform(0, 1, 50).astype(np.float32).astype(np.float64)
    fmt.write_kitti_bin(tmp_path / "r.bin", PointCloud(pos, inten))
    c = fmt.read_kitti_bin(tmp_path / "r.bin")
    assert np.array_equal(c.positions, pos) and np.array_equal(c.intensity, inten)


def test_range_png_examples(tmp_path):
    depth = np.array([[10.0, 0.0]])
    fmt.write_range_png(RangeImage(depth, np.array([[0.5, 0.0]])), tmp_path / "d.png", tmp_path / "i.png")
    import cv2
    raw = cv2.imread(str(tmp_path / "d.png"), cv2.IMREAD_UNCHANGED)
    assert raw.dtype == np.uint16 and raw[0, 0] == 2560 and raw[0, 1] == 0
    back = fmt.read_range_png(tmp_path / "d.png", tmp_path / "i.png")
    assert back.depth[0, 0] == 10.0 and not back.valid[0, 1]


def test_range_png_quantization(tmp_path, rng):
    depth = rng.uniform(0.5, 200.0, (16, 64))
    depth[rng.random(depth.shape) < 0.1] = 0.0
    inten = rng.uniform(0, 1, depth.shape)
    img = RangeImage(depth, inten)
    fmt.write_range_png(img, tmp_path / "d.png", tmp_path / "i.png")
    back = fmt.read_range_png(tmp_path / "d.png", tmp_path / "i.png")
    assert np.array_equal(back.valid, img.valid)
    assert np.abs(back.depth - depth)[img.valid].max() <= 1 / (2 * 256.0)
    assert np.abs(back.intensity - inten)[img.valid].max() <= 1 / (2 * 65535.0) + 1e-12


def test_range_png_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        fmt.write_range_png(RangeImage(np.array([[300.0]]), np.zeros((1, 1))), tmp_path / "d.png")


def test_intrinsics_round_trip(tmp_path):
    intr = hdl64_like(1024, seed=5)
    fmt.write_intrinsics(tmp_path / "s.ini", intr)
    back = fmt.read_intrinsics(tmp_path / "s.ini")
    assert back == intr
    assert [(u.row_start, u.row_end) for u in back.units] == [(0, 32), (32, 64)]
    assert back.width == 1024 and back.height == 64


def test_intrinsics_missing_offsets(tmp_path):
    fmt.write_intrinsics(tmp_path / "s.ini", SensorIntrinsics.single(8, 4, 0.3, 0.1))
    text = (tmp_path / "s.ini").read_text().splitlines()
    (tmp_path / "s.ini").write_text("\n".join(l for l in text if not l.startswith("diode_offsets")))
    with pytest.raises(ValueError, match="diode offsets required"):
        fmt.read_intrinsics(tmp_path / "s.ini")


def test_intrinsics_version_reject(tmp_path):
    fmt.write_intrinsics(tmp_path / "s.ini", SensorIntrinsics.single(8, 4, 0.3, 0.1))
    t = (tmp_path / "s.ini").read_text().replace("version = 1.0", "version = 2.0")
    (tmp_path / "s.ini").write_text(t)
    with pytest.raises(ValueError, match="unsupported version"):
        fmt.read_intrinsics(tmp_path / "s.ini")


def test_poses_examples(tmp_path):
    r = math.sqrt(0.5)
    lines = ["3 0 -1 0 1 1 0 0 2 0 0 1 3", "1 1 0 0 0 0 1 0 0 0 0 1 0"]
    (tmp_path / "p.txt").write_text("\n".join(lines) + "\n")
    poses = fmt.read_poses(tmp_path / "p.txt")
    assert [k for k, _ in poses] == [1, 3]
    assert poses[0][1] == Pose()
    q = poses[1][1].rotation
    assert np.allclose(np.abs(q), [0, 0, r, r], atol=1e-12) and q[2] * q[3] > 0
    assert np.array_equal(poses[1][1].translation, [1, 2, 3])


def test_poses_errors(tmp_path):
    (tmp_path / "d.txt").write_text("1 1 0 0 0 0 1 0 0 0 0 1 0\n1 1 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(ValueError, match="d.txt:2: duplicate"):
        fmt.read_poses(tmp_path / "d.txt")
    (tmp_path / "s.txt").write_text("1 2 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(ValueError, match="orthonormal"):
        fmt.read_poses(tmp_path / "s.txt")


def test_poses_round_trip(tmp_path, rng):
    from pblsim.geometry import rotvec_to_quat
    poses = [(k, Pose(rng.normal(size=3), rotvec_to_quat(rng.normal(size=3)))) for k in range(5)]
    fmt.write_poses(tmp_path / "p.txt", poses)
    back = fmt.read_poses(tmp_path / "p.txt")
    for (a, p), (b, q) in zip(poses, back):
        assert a == b and np.allclose(p.matrix(), q.matrix(), atol=1e-12)


def test_field_round_trip(tmp_path, rng):
    dims = (3, 4, 5)
    fld = VoxelField.empty(dims, 0.25, (-1, 2, 3)).with_channels(
        density=rng.uniform(0, 5, dims).astype(np.float32), intensity=rng.uniform(0, 1, dims).astype(np.float32))
    fmt.save_field(tmp_path / "f.pblf", fld)
    back = fmt.load_field(tmp_path / "f.pblf")
    assert back.dims == dims and back.cell_size == 0.25 and np.array_equal(back.origin, fld.origin)
    assert np.array_equal(back.density, fld.density) and np.array_equal(back.intensity, fld.intensity)


def test_field_version_reject(tmp_path):
    fmt.save_field(tmp_path / "f.pblf", VoxelField.empty((1, 1, 1)))
    raw = (tmp_path / "f.pblf").read_bytes().replace(b'"version": "1.0"', b'"version": "9.0"')
    (tmp_path / "f.pblf").write_bytes(raw)
    with pytest.raises(ValueError, match="unsupported version"):
        fmt.load_field(tmp_path / "f.pblf")
    (tmp_path / "g.pblf").write_bytes(b"garbage!")
    with pytest.raises(ValueError):
        fmt.load_field(tmp_path / "g.pblf")


def test_params_round_trip(tmp_path):
    p = planted_params(64, seed=4)
    fmt.save_params(tmp_path / "p.json", p)
    q = fmt.load_params(tmp_path / "p.json")
    assert q.distance == p.distance and np.array_equal(q.laser_powers, p.laser_powers)
    assert q.incidence_a == p.incidence_a


def test_npz_deterministic(tmp_path, rng):
    img = RangeImage(rng.uniform(1, 5, (4, 8)), rng.uniform(0, 1, (4, 8)))
    fmt.save_range_npz(tmp_path / "a.npz", img, cos=np.ones((4, 8)))
    fmt.save_range_npz(tmp_path / "b.npz", img, cos=np.ones((4, 8)))
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back, extras = fmt.load_range_npz(tmp_path / "a.npz")
    assert np.array_equal(back.depth, img.depth) and np.array_equal(extras["cos"], np.ones((4, 8)))


def test_cloud_npz_round_trip(tmp_path, rng):
    c = PointCloud(rng.normal(size=(10, 3)), rng.uniform(0, 1, 10), np.arange(10), np.arange(10) * 2,
                   np.linspace(0, 0.9, 10))
    fmt.write_cloud(tmp_path / "c.npz", c)
    d = fmt.read_cloud(tmp_path / "c.npz")
    assert np.array_equal(d.positions, c.positions) and np.array_equal(d.ring, c.ring)
    assert np.array_equal(d.time_frac, c.time_frac)


def test_normals_and_incidence_png(tmp_path, rng):
    n = rng.normal(size=(4, 6, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    valid = rng.random((4, 6)) < 0.7
    fmt.write_normals_png(tmp_path / "n.png", n, valid)
    back, v = fmt.read_normals_png(tmp_path / "n.png")
    assert np.array_equal(v, valid)
    assert np.abs(back - n)[valid].max() < 1e-4
    cos = np.where(valid, rng.uniform(0.01, 1, (4, 6)), np.nan)
    fmt.write_incidence_png(tmp_path / "c.png", cos)
    c2 = fmt.read_incidence_png(tmp_path / "c.png")
    assert np.array_equal(np.isnan(c2), ~valid)
    assert np.nanmax(np.abs(c2 - cos)) <= 1 / (2 * 65535) + 1e-12
