"""Readers and writers for clouds, range images, intrinsics, poses and fields."""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
import os
import struct
import zipfile
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from ..field.grid import CHANNELS, VoxelField
from ..geometry import PointCloud, Pose, RangeImage, SensorIntrinsics, UnitIntrinsics, matrix_to_quat
from ..sensor_model import DistanceParams, IntensityParams

FORMAT_VERSION = "1.0"
FIELD_MAGIC = b"PBLFIELD"
U16 = 65535


def _check_version(version, what):
    try:
        major = int(str(version).split(".")[0])
    except ValueError:
        raise ValueError(f"{what}: malformed version {version!r}")
    if major != int(FORMAT_VERSION.split(".")[0]):
        raise ValueError(f"{what}: unsupported version {version}")


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

def read_kitti_bin(path) -> PointCloud:
    """x, y, z, intensity as little-endian float32 quadruples, order preserved."""
    raw = open(path, "rb").read()
    if len(raw) % 16:
        offset = len(raw) - len(raw) % 16
        raise ValueError(f"{path}: length not multiple of 16 ({len(raw)} bytes, "
                         f"truncated point at byte offset {offset})")
    a = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(a[:, :3], a[:, 3])


def write_kitti_bin(path, cloud: PointCloud):
    a = np.empty((len(cloud), 4), dtype="<f4")
    a[:, :3] = cloud.positions
    a[:, 3] = cloud.intensity
    with open(path, "wb") as fh:
        fh.write(a.tobytes())


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _write_png(path, a):
    if not cv2.imwrite(str(path), a):
        raise OSError(f"could not write {path}")


def _read_png(path, flags=cv2.IMREAD_UNCHANGED):
    a = cv2.imread(str(path), flags)
    if a is None:
        raise OSError(f"could not read {path}")
    return a


def write_range_png(img: RangeImage, depth_path, intensity_path=None, depth_scale=256.0):
    """16-bit PNGs: ``round(depth * scale)`` (0 = invalid) and ``round(intensity * 65535)``."""
    q = np.round(img.depth * depth_scale)
    if np.any(q > U16):
        raise ValueError(f"depth beyond {U16 / depth_scale:.3f} m is not representable at scale {depth_scale}")
    q = np.where(img.valid, np.maximum(q, 1), 0)
    _write_png(depth_path, q.astype(np.uint16))
    if intensity_path is not None:
        inten = np.where(img.valid, np.clip(img.intensity, 0.0, 1.0), 0.0)
        _write_png(intensity_path, np.round(inten * U16).astype(np.uint16))


def read_range_png(depth_path, intensity_path=None, depth_scale=256.0) -> RangeImage:
    q = _read_png(depth_path)
    if q.dtype != np.uint16 or q.ndim != 2:
        raise ValueError(f"{depth_path}: expected a 16-bit grayscale PNG")
    depth = q.astype(np.float64) / depth_scale
    if intensity_path is None:
        inten = np.zeros_like(depth)
    else:
        qi = _read_png(intensity_path)
        if qi.shape != q.shape:
            raise ValueError("intensity and depth PNG sizes differ")
        inten = np.where(q > 0, qi.astype(np.float64) / U16, 0.0)
    return RangeImage(depth, inten)


def write_normals_png(path, normal, valid):
    """Unit normals as 16-bit RGB, ``(n + 1) / 2 * 65535``; invalid pixels are black."""
    n = np.where(valid[..., None], (np.asarray(normal) + 1.0) * 0.5, 0.0)
    q = np.round(np.clip(n, 0.0, 1.0) * U16).astype(np.uint16)
    _write_png(path, q[..., ::-1])


def read_normals_png(path):
    q = _read_png(path)[..., ::-1].astype(np.float64) / U16
    valid = np.any(q > 0, axis=-1)
    n = np.where(valid[..., None], q * 2.0 - 1.0, 0.0)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.where(valid[..., None], n / np.maximum(norm, 1e-12), 0.0), valid


def write_incidence_png(path, cos):
    """``cos`` scaled to 16 bit; NaN (no estimate) is stored as 0."""
    c = np.nan_to_num(np.clip(cos, 0.0, 1.0), nan=0.0)
    _write_png(path, np.round(c * U16).astype(np.uint16))


def read_incidence_png(path):
    q = _read_png(path).astype(np.float64)
    return np.where(q > 0, q / U16, np.nan)


def write_mask_png(path, mask):
    _write_png(path, np.where(mask, 255, 0).astype(np.uint8))


def read_mask_png(path):
    return _read_png(path, cv2.IMREAD_GRAYSCALE) > 127


def write_gray_png(path, a, lo=None, hi=None):
    """8-bit preview of a scalar image."""
    a = np.asarray(a, dtype=np.float64)
    fin = np.isfinite(a)
    lo = float(np.min(a[fin])) if lo is None and fin.any() else (lo or 0.0)
    hi = float(np.max(a[fin])) if hi is None and fin.any() else (hi or 1.0)
    v = np.where(fin, (a - lo) / max(hi - lo, 1e-12), 0.0)
    _write_png(path, np.round(np.clip(v, 0, 1) * 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# intrinsics
# ---------------------------------------------------------------------------

def _g17(v) -> str:
    return "%.17g" % v


def write_intrinsics(path, intr: SensorIntrinsics):
    cp = configparser.ConfigParser()
    cp["sensor"] = {
        "version": FORMAT_VERSION,
        "width": str(intr.width),
        "height": str(intr.height),
        "units": str(len(intr.units)),
        "diode_offsets": ", ".join(_g17(v) for v in intr.diode_offsets),
    }
    for k, u in enumerate(intr.units):
        cp[f"unit{k}"] = {
            "fov": _g17(u.fov), "fov_offset": _g17(u.fov_offset), "z_offset": _g17(u.z_offset),
            "row_start": str(u.row_start), "row_end": str(u.row_end),
        }
    with open(path, "w") as fh:
        cp.write(fh)


def read_intrinsics(path) -> SensorIntrinsics:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise OSError(f"could not read {path}")
    if "sensor" not in cp:
        raise ValueError(f"{path}: missing [sensor] section")
    s = cp["sensor"]
    _check_version(s.get("version", FORMAT_VERSION), path)
    if not s.get("diode_offsets", "").strip():
        raise ValueError(f"{path}: diode offsets required")
    try:
        width, height = int(s["width"]), int(s["height"])
        n_units = int(s.get("units", "1"))
        delta = np.array([float(v) for v in s["diode_offsets"].split(",")])
        units = []
        for k in range(n_units):
            u = cp[f"unit{k}"]
            units.append(UnitIntrinsics(float(u["fov"]), float(u["fov_offset"]), float(u["z_offset"]),
                                        int(u["row_start"]), int(u["row_end"])))
    except KeyError as exc:
        raise ValueError(f"{path}: missing key {exc}")
    return SensorIntrinsics(width, height, units, delta)


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

def read_poses(path, tol=1e-4) -> List[Tuple[int, Pose]]:
    """``frame_id`` plus a row-major 3x4 rigid transform per line, sorted by id."""
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 13:
                raise ValueError(f"{path}:{ln}: expected 13 numbers, got {len(parts)}")
            fid = int(parts[0])
            m = np.array([float(v) for v in parts[1:]]).reshape(3, 4)
            R = m[:, :3]
            if np.abs(R @ R.T - np.eye(3)).max() > tol or np.linalg.det(R) < 0:
                raise ValueError(f"{path}:{ln}: rotation is not orthonormal")
            if fid in out:
                raise ValueError(f"{path}:{ln}: duplicate frame id {fid}")
            out[fid] = Pose(m[:, 3], matrix_to_quat(R))
    return [(k, out[k]) for k in sorted(out)]


def write_poses(path, poses: Sequence[Tuple[int, Pose]]):
    with open(path, "w") as fh:
        for fid, p in poses:
            m = p.matrix()[:3, :4].reshape(-1)
            fh.write(f"{int(fid)} " + " ".join(_g17(v) for v in m) + "\n")


# ---------------------------------------------------------------------------
# field checkpoints
# ---------------------------------------------------------------------------

def save_field(path, fld: VoxelField):
    """``PBLFIELD``, uint32 header length, JSON header, then float32 LE channels in C order."""
    header = json.dumps({
        "version": FORMAT_VERSION,
        "dims": list(fld.dims),
        "cell_size": fld.cell_size,
        "origin": [float(v) for v in fld.origin],
        "channels": list(CHANNELS),
        "dtype": "<f4",
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for c in CHANNELS:
            fh.write(getattr(fld, c).astype("<f4").tobytes())


def load_field(path) -> VoxelField:
    raw = open(path, "rb").read()
    if raw[:8] != FIELD_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode())
    _check_version(header.get("version"), path)
    dims = tuple(header["dims"])
    size = int(np.prod(dims))
    body = np.frombuffer(raw[12 + n:], dtype="<f4")
    chans = header["channels"]
    if len(body) != size * len(chans):
        raise ValueError(f"{path}: payload has {len(body)} values, expected {size * len(chans)}")
    data = {c: body[k * size:(k + 1) * size].reshape(dims).astype(np.float64) for k, c in enumerate(chans)}
    missing = set(CHANNELS) - set(data)
    if missing:
        raise ValueError(f"{path}: missing channels {sorted(missing)}")
    return VoxelField(dims, header["cell_size"], header["origin"], *(data[c] for c in CHANNELS))


# ---------------------------------------------------------------------------
# sensor parameters
# ---------------------------------------------------------------------------

def params_to_dict(p: IntensityParams) -> dict:
    return {
        "version": FORMAT_VERSION,
        "distance": dataclasses.asdict(p.distance),
        "laser_powers": [float(v) for v in p.laser_powers],
        "incidence_a": p.incidence_a,
        "incidence_b": p.incidence_b,
        "reflect_target": p.reflect_target,
        "reflect_scale": p.reflect_scale,
    }


def params_from_dict(d: dict) -> IntensityParams:
    _check_version(d.get("version", FORMAT_VERSION), "params")
    d = dict(d)
    d.pop("version", None)
    dist = DistanceParams(**d.pop("distance", {}))
    lp = np.asarray(d.pop("laser_powers"), dtype=np.float64)
    return IntensityParams(dist, lp, **d)


def save_params(path, p: IntensityParams):
    with open(path, "w") as fh:
        json.dump(params_to_dict(p), fh, indent=1)


def load_params(path) -> IntensityParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))


def save_npz(path, **arrays):
    """Like ``np.savez`` but byte-reproducible (fixed member timestamps and order)."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def save_cloud_npz(path, cloud: PointCloud):
    """Lossless cloud with range-view bookkeeping."""
    arrays = {"positions": cloud.positions, "intensity": cloud.intensity}
    for k in ("ring", "col", "time_frac"):
        v = getattr(cloud, k)
        if v is not None:
            arrays[k] = v
    save_npz(path, **arrays)


def load_cloud_npz(path) -> PointCloud:
    with np.load(path) as z:
        get = lambda k: z[k] if k in z.files else None
        return PointCloud(z["positions"], z["intensity"], get("ring"), get("col"), get("time_frac"))


def save_range_npz(path, img: RangeImage, **extra):
    """Lossless range image; ``extra`` arrays (e.g. ``cos``) are stored alongside."""
    save_npz(path, depth=img.depth, intensity=img.intensity, **extra)


def load_range_npz(path):
    """``(RangeImage, extras)``."""
    with np.load(path) as z:
        extras = {k: z[k] for k in z.files if k not in ("depth", "intensity")}
        return RangeImage(z["depth"], z["intensity"]), extras


def read_cloud(path) -> PointCloud:
    """KITTI ``.bin`` or ``.npz`` by extension."""
    return load_cloud_npz(path) if str(path).endswith(".npz") else read_kitti_bin(path)


def write_cloud(path, cloud: PointCloud):
    if str(path).endswith(".npz"):
        save_cloud_npz(path, cloud)
    else:
        write_kitti_bin(path, cloud)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
