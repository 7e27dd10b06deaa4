"""Volumetric accumulation through a :class:`VoxelField` and its adjoint.

Rays are sampled at ``t_n = (n + 0.5 + offset) * step`` inside the grid box.
All rays of a chunk are flattened into one ragged sample array; per-ray sums
use ``np.bincount`` so the result does not depend on how rays are chunked.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np

from ..geometry import (Pose, SensorIntrinsics, interpolate_pose, column_times, quat_to_matrix,
                        rotvec_to_matrix, sensor_rays)
from ..normals import incidence_from_depth, normals_from_xyz
from ..sensor_model import EFFECTS, IntensityParams, apply_model
from .grid import VALUE_CHANNELS, Trilinear, VoxelField, trilinear

MAX_SAMPLES = 1 << 19


@dataclass
class RayOutputs:
    depth: np.ndarray
    intensity: np.ndarray
    reflectivity: np.ndarray
    drop: np.ndarray
    residual: np.ndarray

    @property
    def weight_sum(self) -> np.ndarray:
        return 1.0 - self.residual

    def channel(self, name):
        return getattr(self, name)


@dataclass
class RayResult:
    """Single-ray render with its sample weights."""

    depth: float
    intensity: float
    reflectivity: float
    drop: float
    residual: float
    t: np.ndarray
    weights: np.ndarray


@dataclass
class RenderResult:
    depth: np.ndarray
    intensity_base: np.ndarray
    reflectivity: np.ndarray
    drop_prob: np.ndarray
    transmittance_residual: np.ndarray
    # sensor-model output (unclamped) and the incidence it used
    intensity: Optional[np.ndarray] = None
    cos_incidence: Optional[np.ndarray] = None


def default_step(fld: VoxelField) -> float:
    return fld.cell_size / 2.0


def _ray_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # axis-parallel rays: inside the slab -> unbounded, outside -> miss
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=1), tmax.min(axis=1)


def _sample_ranges(fld, o, d, step, max_range, offsets):
    t_in, t_out = _ray_box(o, d, fld.origin, fld.upper)
    t_in = np.maximum(t_in, 0.0)
    t_out = np.minimum(t_out, max_range)
    hit = t_out >= t_in
    with np.errstate(invalid="ignore"):
        n0 = np.ceil(t_in / step - 0.5 - offsets)
        n1 = np.floor(t_out / step - 0.5 - offsets)
    n0 = np.where(hit, n0, 0).astype(np.int64)
    cnt = np.where(hit, np.maximum(n1 - n0 + 1, 0), 0).astype(np.int64)
    return n0, cnt


def _segment_exclusive_cumsum(x, ray_of, n_rays):
    cs = np.cumsum(x)
    counts = np.bincount(ray_of, minlength=n_rays)
    starts = np.cumsum(counts) - counts
    base = np.zeros(n_rays)
    ne = counts > 0
    base[ne] = cs[starts[ne]] - x[starts[ne]]
    return cs - x - base[ray_of]


class _Samples:
    """Flattened samples of one chunk of rays."""

    def __init__(self, fld, flats, o, d, step, max_range, offsets, occ, channels):
        R = len(o)
        self.n_rays = R
        n0, cnt = _sample_ranges(fld, o, d, step, max_range, offsets)
        ray_of = np.repeat(np.arange(R), cnt)
        first = np.cumsum(cnt) - cnt
        n = n0[ray_of] + np.arange(len(ray_of)) - first[ray_of]
        t = (n + 0.5 + offsets[ray_of]) * step
        x = o[ray_of] + t[:, None] * d[ray_of]
        if occ is not None and len(x):
            u = np.floor((x - fld.origin) / fld.cell_size - 0.5).astype(np.int64)
            u = np.clip(u, 0, np.asarray(fld.dims) - 1)
            keep = occ[u[:, 0], u[:, 1], u[:, 2]]
            ray_of, t, x = ray_of[keep], t[keep], x[keep]
        self.ray_of, self.t, self.x = ray_of, t, x
        self.tl: Trilinear = trilinear(fld, x)
        self.sigma = self.tl.gather(flats["density"])
        self.tau = self.sigma * step
        excl = _segment_exclusive_cumsum(self.tau, ray_of, R)
        self.T = np.exp(-excl)
        self.w = self.T * -np.expm1(-self.tau)
        self.values = {c: self.tl.gather(flats[c]) for c in channels}
        self.residual = np.exp(-np.bincount(ray_of, self.tau, minlength=R))

    def accumulate(self, v):
        return np.bincount(self.ray_of, self.w * v, minlength=self.n_rays)


def _flats(fld):
    return {c: fld.flat(c) for c in ("density",) + VALUE_CHANNELS}


def _chunks(counts, max_samples):
    """Split ray indices so every chunk holds at most ``max_samples`` samples (>= 1 ray)."""
    out = []
    start, acc = 0, 0
    for k, c in enumerate(counts):
        if k > start and acc + c > max_samples:
            out.append((start, k))
            start, acc = k, 0
        acc += c
    out.append((start, len(counts)))
    return out


def _prepare(fld, origins, dirs, step, offsets):
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    if o.shape != d.shape:
        raise ValueError("origins and directions differ in shape")
    if step is None:
        step = default_step(fld)
    if not step > 0:
        raise ValueError("step must be positive")
    off = np.zeros(len(o)) if offsets is None else np.asarray(offsets, dtype=np.float64).reshape(len(o))
    return o, d, float(step), off


def _map(fn, items, workers):
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def render_rays(fld: VoxelField, origins, dirs, step=None, max_range=np.inf, offsets=None,
                skip_empty=True, max_samples=MAX_SAMPLES, workers=1) -> RayOutputs:
    """Accumulated depth, value channels and residual transmittance per ray."""
    o, d, step, off = _prepare(fld, origins, dirs, step, offsets)
    flats = _flats(fld)
    occ = fld.occupancy_blocks() if skip_empty else None
    _, cnt = _sample_ranges(fld, o, d, step, max_range, off)

    def run(span):
        a, b = span
        s = _Samples(fld, flats, o[a:b], d[a:b], step, max_range, off[a:b], occ, VALUE_CHANNELS)
        return (s.accumulate(s.t),) + tuple(s.accumulate(s.values[c]) for c in VALUE_CHANNELS) + (s.residual,)

    parts = _map(run, _chunks(cnt, max_samples), workers)
    cols = [np.concatenate([p[k] for p in parts]) if parts else np.zeros(0) for k in range(5)]
    return RayOutputs(*cols)


def backprop_rays(fld: VoxelField, origins, dirs, upstream: Dict[str, np.ndarray], step=None,
                  max_range=np.inf, offsets=None, want: Iterable[str] = ("density",) + VALUE_CHANNELS,
                  want_rays=False, max_samples=MAX_SAMPLES, workers=1) -> Dict[str, np.ndarray]:
    """Vector-Jacobian product of :func:`render_rays`.

    ``upstream`` holds per-ray loss gradients for any of ``depth``,
    ``intensity``, ``reflectivity``, ``drop`` and ``residual``. Returns flat
    per-cell gradients for the channels in ``want`` and, with ``want_rays``,
    per-ray gradients ``origins`` and ``dirs``.
    """
    o, d, step, off = _prepare(fld, origins, dirs, step, offsets)
    want = tuple(want)
    R = len(o)
    zeros = np.zeros(R)
    gD = np.asarray(upstream.get("depth", zeros), dtype=np.float64).reshape(R)
    gRes = np.asarray(upstream.get("residual", zeros), dtype=np.float64).reshape(R)
    gV = {c: np.asarray(upstream[c], dtype=np.float64).reshape(R)
          for c in VALUE_CHANNELS if c in upstream}
    flats = _flats(fld)
    # empty samples only matter for the density gradient
    occ = None if "density" in want else fld.occupancy_blocks()
    _, cnt = _sample_ranges(fld, o, d, step, max_range, off)
    ncell = fld.size

    def run(span):
        a, b = span
        s = _Samples(fld, flats, o[a:b], d[a:b], step, max_range, off[a:b], occ, tuple(gV))
        r = s.ray_of
        q = gD[a:b][r] * s.t
        for c, g in gV.items():
            q = q + g[a:b][r] * s.values[c]
        wq = s.w * q
        incl = _segment_exclusive_cumsum(wq, r, s.n_rays) + wq
        after = np.bincount(r, wq, minlength=s.n_rays)[r] - incl
        T_after = s.T * np.exp(-s.tau)
        dsig = step * (T_after * q - after - gRes[a:b][r] * s.residual[r])
        out = {}
        flat_idx = s.tl.idx.ravel()
        if "density" in want:
            out["density"] = np.bincount(flat_idx, (s.tl.w * dsig[:, None]).ravel(), minlength=ncell)
        dv = {c: g[a:b][r] * s.w for c, g in gV.items()}
        for c in VALUE_CHANNELS:
            if c in want:
                vals = dv.get(c)
                out[c] = (np.zeros(ncell) if vals is None else
                          np.bincount(flat_idx, (s.tl.w * vals[:, None]).ravel(), minlength=ncell))
        if want_rays:
            dw = s.tl.weight_gradients(fld.cell_size)
            coef = dsig[:, None] * flats["density"][s.tl.idx]
            for c, vals in dv.items():
                coef = coef + vals[:, None] * flats[c][s.tl.idx]
            gx = np.einsum("sci,sc->si", dw, coef)
            out["origins"] = np.stack([np.bincount(r, gx[:, k], minlength=s.n_rays) for k in range(3)], 1)
            out["dirs"] = np.stack([np.bincount(r, s.t * gx[:, k], minlength=s.n_rays) for k in range(3)], 1)
        return out

    parts = _map(run, _chunks(cnt, max_samples), workers)
    result: Dict[str, np.ndarray] = {}
    for c in want:
        acc = np.zeros(ncell)
        for p in parts:
            acc += p[c]
        result[c] = acc
    if want_rays:
        result["origins"] = np.concatenate([p["origins"] for p in parts]) if parts else np.zeros((0, 3))
        result["dirs"] = np.concatenate([p["dirs"] for p in parts]) if parts else np.zeros((0, 3))
    return result


def render_ray(fld: VoxelField, origin, direction, step=None, max_range=np.inf, offset=0.0) -> RayResult:
    """One ray with its per-sample distances and weights (empty samples included)."""
    o, d, step, off = _prepare(fld, np.reshape(origin, (1, 3)), np.reshape(direction, (1, 3)),
                               step, [offset])
    s = _Samples(fld, _flats(fld), o, d, step, max_range, off, None, VALUE_CHANNELS)
    return RayResult(float(s.accumulate(s.t)[0]),
                     *(float(s.accumulate(s.values[c])[0]) for c in VALUE_CHANNELS),
                     float(s.residual[0]), s.t, s.w)


# ---------------------------------------------------------------------------
# scans and cameras
# ---------------------------------------------------------------------------

@dataclass
class PoseOffset:
    """Small rotation vector (radians) and translation (meters) applied on top of a pose."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.rotation)) and np.all(np.isfinite(self.translation))):
            raise ValueError("pose offsets must be finite")
        if np.linalg.norm(self.rotation) >= math.pi:
            raise ValueError("rotation offset must be smaller than pi")

    @classmethod
    def zero(cls) -> "PoseOffset":
        return cls(np.zeros(3), np.zeros(3))


def column_frames(intr: SensorIntrinsics, p0: Pose, p1: Pose, shutter=True, reverse=False,
                  method="nlerp"):
    """Per-column rotation matrices ``(W, 3, 3)`` and translations ``(W, 3)``."""
    W = intr.width
    if not shutter:
        return np.broadcast_to(p0.R, (W, 3, 3)).copy(), np.broadcast_to(p0.translation, (W, 3)).copy()
    poses = [interpolate_pose(p0, p1, float(t), method) for t in column_times(W, reverse)]
    return (quat_to_matrix(np.stack([p.rotation for p in poses])),
            np.stack([p.translation for p in poses]))


def scan_rays(intr: SensorIntrinsics, p0: Pose, p1: Pose, shutter=True, reverse=False,
              offset: Optional[PoseOffset] = None, method="nlerp"):
    """World-frame ray origins and directions ``(H, W, 3)`` of one revolution."""
    Rc, tc = column_frames(intr, p0, p1, shutter, reverse, method)
    o, d = sensor_rays(intr)
    a = np.einsum("wab,hwb->hwa", Rc, o)
    b = np.einsum("wab,hwb->hwa", Rc, d)
    org = a + tc[None]
    if offset is not None:
        E = rotvec_to_matrix(offset.rotation)
        org = a @ E.T + tc[None] + offset.translation
        b = b @ E.T
    return org, b


def _finish(out: RayOutputs, shape) -> RenderResult:
    drop = np.clip(out.drop + out.residual, 0.0, 1.0)
    return RenderResult(out.depth.reshape(shape), out.intensity.reshape(shape),
                        out.reflectivity.reshape(shape), drop.reshape(shape),
                        out.residual.reshape(shape))


def range_image_from(res: RenderResult):
    from ..geometry import RangeImage

    valid = (res.drop_prob < 0.5) & (res.depth > 0)
    inten = res.intensity if res.intensity is not None else res.intensity_base
    return RangeImage(np.where(valid, res.depth, 0.0), np.where(valid, np.clip(inten, 0.0, 1.0), 0.0))


def render_scan(fld: VoxelField, intr: SensorIntrinsics, p0: Pose, p1: Optional[Pose] = None,
                params: Optional[IntensityParams] = None, shutter=True, normals_source="rendered",
                effects=EFFECTS, step=None, max_range=np.inf, reverse=False,
                offset: Optional[PoseOffset] = None, workers=1):
    """Render one revolution; returns ``(RangeImage, RenderResult)``.

    ``normals_source`` is ``"rendered"`` (Scharr normals of the rendered depth),
    an ``H x W`` cosine image, or ``None`` (incidence factor 1). Pixels without
    a normal use ``cos = 1``.
    """
    p1 = p0 if p1 is None else p1
    params = params or IntensityParams(laser_powers=np.ones(intr.height))
    if len(params.laser_powers) != intr.height:
        raise ValueError("laser_powers length does not match the sensor height")
    org, dirs = scan_rays(intr, p0, p1, shutter, reverse, offset)
    out = render_rays(fld, org.reshape(-1, 3), dirs.reshape(-1, 3), step, max_range, workers=workers)
    res = _finish(out, (intr.height, intr.width))
    valid = (res.drop_prob < 0.5) & (res.depth > 0)
    if isinstance(normals_source, str) and normals_source == "rendered":
        cos, _ = incidence_from_depth(np.where(valid, res.depth, 0.0), intr)
    elif normals_source is None:
        cos = np.ones((intr.height, intr.width))
    else:
        cos = np.asarray(normals_source, dtype=np.float64)
    ring = np.broadcast_to(np.arange(intr.height)[:, None], cos.shape)
    res.cos_incidence = cos
    res.intensity = apply_model(res.intensity_base, res.depth, np.nan_to_num(cos, nan=1.0),
                                res.reflectivity, ring, params, effects)
    return range_image_from(res), res


@dataclass(frozen=True)
class Pinhole:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    def rays(self):
        """Unit directions ``(height, width, 3)`` in the camera frame (x right, y down, z forward)."""
        v, u = np.meshgrid(np.arange(self.height, dtype=np.float64),
                           np.arange(self.width, dtype=np.float64), indexing="ij")
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def render_camera(fld: VoxelField, cam: Pinhole, pose: Pose, params: Optional[IntensityParams] = None,
                  effects=frozenset({"distance", "incidence"}), step=None, max_range=np.inf,
                  workers=1) -> RenderResult:
    """Perspective render of the field; no rolling shutter and no per-row laser power."""
    d_cam = cam.rays()
    dirs = d_cam @ pose.R.T
    org = np.broadcast_to(pose.translation, dirs.shape)
    out = render_rays(fld, org.reshape(-1, 3), dirs.reshape(-1, 3), step, max_range, workers=workers)
    res = _finish(out, (cam.height, cam.width))
    valid = (res.drop_prob < 0.5) & (res.depth > 0)
    xyz = np.where(valid[..., None], d_cam * res.depth[..., None], 0.0)
    _, _, cos = normals_from_xyz(xyz, valid, np.zeros(3), wrap=False)
    res.cos_incidence = cos
    if params is None:
        res.intensity = res.intensity_base.copy()
    else:
        eff = frozenset(effects) - {"laser"}
        res.intensity = apply_model(res.intensity_base, res.depth, np.nan_to_num(cos, nan=1.0),
                                    res.reflectivity, 0, params, eff)
    return res


def accumulation_matrix(fld: VoxelField, origins, dirs, step=None, max_range=np.inf,
                        max_samples=MAX_SAMPLES, prune=1e-12):
    """Sparse ``rays x cells`` operator mapping a value channel to its accumulation.

    Valid while density and ray geometry stay fixed. Entries below ``prune``
    are dropped. Returns ``(A, RayOutputs)``.
    """
    from scipy import sparse

    o, d, step, off = _prepare(fld, origins, dirs, step, None)
    flats = _flats(fld)
    occ = fld.occupancy_blocks()
    _, cnt = _sample_ranges(fld, o, d, step, max_range, off)
    blocks, outs = [], []
    for a, b in _chunks(cnt, max_samples):
        s = _Samples(fld, flats, o[a:b], d[a:b], step, max_range, off[a:b], occ, VALUE_CHANNELS)
        vals = s.w[:, None] * s.tl.w
        keep = vals > prune
        rows = np.broadcast_to(s.ray_of[:, None] + a, vals.shape)[keep]
        blocks.append((vals[keep], rows, s.tl.idx[keep]))
        outs.append((s.accumulate(s.t),) + tuple(s.accumulate(s.values[c]) for c in VALUE_CHANNELS)
                    + (s.residual,))
    data = np.concatenate([b[0] for b in blocks])
    rows = np.concatenate([b[1] for b in blocks])
    cols = np.concatenate([b[2] for b in blocks])
    A = sparse.csr_matrix((data, (rows, cols)), shape=(len(o), fld.size))
    out = RayOutputs(*(np.concatenate([p[k] for p in outs]) for k in range(5)))
    return A, out
