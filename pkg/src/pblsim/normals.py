"""Surface normals and incidence angles on the range-view grid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .geometry import SensorIntrinsics, sensor_rays

_SMOOTH = (3.0, 10.0, 3.0)


class EdgeFlag(IntEnum):
    NONE = 0
    STRONG_EDGE = 1
    HORIZONTAL_ARTIFACT = 2


@dataclass
class NormalImage:
    normal: np.ndarray          # H x W x 3, zero where invalid
    cos_incidence: np.ndarray   # H x W, NaN where invalid
    edge_flags: np.ndarray      # H x W, EdgeFlag values
    valid: np.ndarray           # H x W bool

    def copy(self) -> "NormalImage":
        return NormalImage(self.normal.copy(), self.cos_incidence.copy(),
                           self.edge_flags.copy(), self.valid.copy())


def _neighbor(a, valid, di, dj, wrap):
    """Shifted view ``a[i + di, j + dj]`` with a matching validity mask."""
    H = a.shape[0]
    out = np.roll(a, (-di, -dj), axis=(0, 1))
    ok = np.roll(valid, (-di, -dj), axis=(0, 1))
    if di:
        rows = np.arange(H) + di
        ok = ok & ((rows >= 0) & (rows < H))[:, None]
    if dj and not wrap:
        W = a.shape[1]
        cols = np.arange(W) + dj
        ok = ok & ((cols >= 0) & (cols < W))[None, :]
    return out, ok


def scharr(a, valid, wrap=True):
    """Scharr responses ``(d/dj, d/di)`` normalized to per-pixel units.

    Missing neighbors (invalid, or beyond the top/bottom rows) take the center
    value, which turns the stencil one-sided instead of mixing in garbage.
    Columns wrap around when ``wrap`` is set.
    """
    a = np.asarray(a, dtype=np.float64)
    ext = a if a.ndim == 3 else a[..., None]
    gj = np.zeros_like(ext)
    gi = np.zeros_like(ext)
    for k, w in zip((-1, 0, 1), _SMOOTH):
        for sgn in (-1, 1):
            v, ok = _neighbor(ext, valid, k, sgn, wrap)
            gj += sgn * w * np.where(ok[..., None], v, ext)
            v, ok = _neighbor(ext, valid, sgn, k, wrap)
            gi += sgn * w * np.where(ok[..., None], v, ext)
    gj /= 32.0
    gi /= 32.0
    if a.ndim == 2:
        return gj[..., 0], gi[..., 0]
    return gj, gi


def normals_from_xyz(xyz, valid, origins, wrap=True):
    """Normals from a coordinate image, oriented towards ``origins``.

    Returns ``(normal, ok, cos_incidence)``. ``origins`` broadcasts against
    ``xyz`` (per-row unit centers for LiDAR, a single point for cameras).
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    tj, ti = scharr(xyz, valid, wrap)
    n = np.cross(tj, ti)
    nn = np.linalg.norm(n, axis=-1)
    scale = np.linalg.norm(tj, axis=-1) * np.linalg.norm(ti, axis=-1)
    ok = valid & (nn > 1e-9 * np.maximum(scale, 1e-300)) & (scale > 0)
    n = np.where(ok[..., None], n / np.where(nn > 0, nn, 1.0)[..., None], 0.0)
    ray = xyz - origins
    rn = np.linalg.norm(ray, axis=-1)
    ray = ray / np.where(rn > 0, rn, 1.0)[..., None]
    dot = np.sum(n * ray, axis=-1)
    n = np.where((dot > 0)[..., None], -n, n)
    cos = np.where(ok, np.clip(np.abs(dot), 0.0, 1.0), np.nan)
    return n, ok, cos


def estimate_normals(xyz, intr: SensorIntrinsics, valid=None) -> NormalImage:
    """Scharr normals of a sensor-frame ``H x W x 3`` coordinate image."""
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.shape != (intr.height, intr.width, 3):
        raise ValueError("xyz image does not match the intrinsics")
    if valid is None:
        valid = np.any(xyz != 0, axis=-1)
    origins = intr.row_origins()[:, None, :]
    n, ok, cos = normals_from_xyz(xyz, valid, origins, wrap=True)
    flags = np.zeros(ok.shape, dtype=np.int8)
    return NormalImage(n, cos, flags, ok)


def depth_edges(depth, valid, edge_threshold=0.1):
    """Relative depth-gradient magnitude ``|grad d| / d`` above the threshold."""
    gj, gi = scharr(depth, valid, wrap=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.hypot(gj, gi) / np.where(valid, depth, np.inf)
    return valid & (rel > edge_threshold)


def _angle(a, b):
    c = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.arccos(c)


def repair_edges(nimg: NormalImage, depth, edge_threshold=0.1,
                 artifact_threshold=math.radians(10.0), flat_threshold=0.05) -> NormalImage:
    """Flag strong depth edges and repair diode-bias horizontal artifacts.

    A pixel is an artifact when its normal deviates more than
    ``artifact_threshold`` from the mean of its upper and lower neighbors, the
    depth second difference across it stays below ``flat_threshold`` meters,
    and its deviation is a vertical local maximum. Such normals are replaced by
    the renormalized neighbor mean; detection repeats until nothing changes,
    which makes the operation idempotent.
    """
    depth = np.asarray(depth, dtype=np.float64)
    out = nimg.copy()
    valid = out.valid
    edges = depth_edges(depth, depth > 0, edge_threshold) & valid
    out.edge_flags[edges & (out.edge_flags == EdgeFlag.NONE)] = EdgeFlag.STRONG_EDGE
    H = depth.shape[0]

    up_ok = np.zeros_like(valid)
    dn_ok = np.zeros_like(valid)
    up_ok[1:] = valid[:-1]
    dn_ok[:-1] = valid[1:]
    both = up_ok & dn_ok
    d_up = np.zeros_like(depth)
    d_dn = np.zeros_like(depth)
    d_up[1:] = depth[:-1]
    d_dn[:-1] = depth[1:]
    flat = both & (np.abs(d_up - 2.0 * depth + d_dn) < flat_threshold)

    for _ in range(H * depth.shape[1] + 1):
        n = out.normal
        n_up = np.zeros_like(n)
        n_dn = np.zeros_like(n)
        n_up[1:] = n[:-1]
        n_dn[:-1] = n[1:]
        avg = n_up + n_dn
        an = np.linalg.norm(avg, axis=-1)
        avg = avg / np.where(an > 0, an, 1.0)[..., None]
        dev = np.where(flat & (an > 1e-9), _angle(n, avg), 0.0)
        dev_up = np.zeros_like(dev)
        dev_dn = np.zeros_like(dev)
        dev_up[1:] = dev[:-1]
        dev_dn[:-1] = dev[1:]
        cand = (valid & (out.edge_flags == EdgeFlag.NONE) & (dev > artifact_threshold)
                & (dev >= dev_up) & (dev >= dev_dn))
        if not cand.any():
            break
        out.normal = np.where(cand[..., None], avg, n)
        out.edge_flags[cand] = EdgeFlag.HORIZONTAL_ARTIFACT
    return out


def incidence_image(nimg: NormalImage, intr: SensorIntrinsics,
                    incidence_threshold=math.radians(85.0)):
    """``cos(phi_n)`` along the pixel-center rays and the shallow-incidence flag.

    Returns ``(cos, shallow)``; ``cos`` is NaN where no normal exists, and
    ``shallow`` marks valid pixels whose incidence angle exceeds the threshold.
    """
    _, d = sensor_rays(intr)
    c = np.clip(-np.sum(nimg.normal * d, axis=-1), 0.0, 1.0)
    c = np.where(nimg.valid, c, np.nan)
    shallow = nimg.valid & (np.nan_to_num(c, nan=1.0) < math.cos(incidence_threshold))
    return c, shallow


def covariance_normals(xyz, valid, origins, k=12):
    """Normals from a PCA plane fit over the ``k`` nearest 3D neighbors."""
    from scipy.spatial import cKDTree

    xyz = np.asarray(xyz, dtype=np.float64)
    pts = xyz[valid]
    out = np.zeros_like(xyz)
    if len(pts) < 3:
        return out
    tree = cKDTree(pts)
    _, nb = tree.query(pts, k=min(k, len(pts)))
    nbh = pts[nb]
    cen = nbh - nbh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", cen, cen)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    org = np.broadcast_to(origins, xyz.shape)[valid]
    flip = np.sum(n * (pts - org), axis=-1) > 0
    n[flip] *= -1
    out[valid] = n
    return out


def incidence_from_depth(depth, intr: SensorIntrinsics, incidence_threshold=math.radians(85.0)):
    """Full normal pipeline on a range image's depth: returns ``(cos, strong_edge)``.

    ``cos`` is NaN where no normal exists.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    o, d = sensor_rays(intr)
    xyz = np.where(valid[..., None], o + depth[..., None] * d, 0.0)
    nimg = repair_edges(estimate_normals(xyz, intr, valid), depth)
    cos, _ = incidence_image(nimg, intr, incidence_threshold)
    return cos, nimg.edge_flags == EdgeFlag.STRONG_EDGE
