"""Analytic scene synthesizer used as the ground-truth oracle.

Rays are intersected with planes, spheres and boxes in closed form; nothing
here touches the voxel renderer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..geometry import (Pose, PointCloud, RangeImage, SensorIntrinsics, UnitIntrinsics,
                        column_times, interpolate_pose, quat_to_matrix, sensor_rays)
from ..sensor_model import EFFECTS, DistanceParams, IntensityParams, apply_model

KINDS = ("plane", "sphere", "box")


@dataclass
class Primitive:
    """A scene object.

    ``extent`` is ``(hx, hy)`` half sizes for a plane (local normal ``+z``,
    ``inf`` for unbounded), ``(r,)`` for a sphere and ``(hx, hy, hz)`` for a
    box. Planes are two-sided when ray traced; the voxelizer treats the local
    ``-z`` side as solid.
    """

    kind: str
    pose: Pose
    extent: Tuple[float, ...]
    base_intensity: float = 0.5
    reflectivity: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive {self.kind!r}")
        need = {"plane": 2, "sphere": 1, "box": 3}[self.kind]
        self.extent = tuple(float(e) for e in self.extent)
        if len(self.extent) != need or any(not e > 0 for e in self.extent):
            raise ValueError(f"{self.kind} needs {need} positive extents")
        if not (0 <= self.base_intensity <= 1 and 0 <= self.reflectivity <= 1):
            raise ValueError("base_intensity and reflectivity must lie in [0, 1]")


@dataclass
class Noise:
    depth: float = 0.0
    intensity: float = 0.0

    def __post_init__(self):
        if self.depth < 0 or self.intensity < 0:
            raise ValueError("noise levels must be non-negative")


@dataclass
class SceneSpec:
    primitives: List[Primitive]
    intrinsics: SensorIntrinsics
    params: IntensityParams
    trajectory: List[Pose]
    noise: Noise = field(default_factory=Noise)
    seed: int = 0
    max_range: float = 80.0
    effects: frozenset = EFFECTS
    shutter: bool = True
    reverse: bool = False

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        if len(self.trajectory) < 1:
            raise ValueError("scene needs at least one pose")
        if len(self.params.laser_powers) != self.intrinsics.height:
            raise ValueError("laser_powers length does not match the sensor height")

    @property
    def n_frames(self) -> int:
        """Frame ``k`` spans poses ``k`` and ``k + 1`` (the last frame is static)."""
        return len(self.trajectory)

    def frame_poses(self, frame: int):
        if not 0 <= frame < self.n_frames:
            raise IndexError(f"frame {frame} outside the trajectory")
        p0 = self.trajectory[frame]
        p1 = self.trajectory[frame + 1] if frame + 1 < self.n_frames else p0
        return p0, p1


@dataclass
class SynthScan:
    cloud: PointCloud          # noisy, sensor frame, with ring/col/time
    image: RangeImage          # noisy observation
    truth: RangeImage          # noiseless
    normals: np.ndarray        # H x W x 3, sensor frame of the column pose
    cos_incidence: np.ndarray  # H x W, NaN where nothing was hit
    primitive: np.ndarray      # H x W index, -1 for no hit
    p0: Pose
    p1: Pose


# ---------------------------------------------------------------------------
# intersections (world frame, unit directions)
# ---------------------------------------------------------------------------

def _to_local(prim, o, d):
    R = prim.pose.R
    return (o - prim.pose.translation) @ R, d @ R, R


def intersect(prim: Primitive, o, d):
    """Nearest positive hit distance (inf for misses) and outward normal."""
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    ol, dl, R = _to_local(prim, o, d)
    n_local = np.zeros_like(ol)
    if prim.kind == "plane":
        hx, hy = prim.extent
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -ol[:, 2] / dl[:, 2]
        p = ol + t[:, None] * dl
        ok = (dl[:, 2] != 0) & (t > 0) & (np.abs(p[:, 0]) <= hx) & (np.abs(p[:, 1]) <= hy)
        t = np.where(ok, t, np.inf)
        n_local[:, 2] = 1.0
    elif prim.kind == "sphere":
        r = prim.extent[0]
        b = np.sum(ol * dl, axis=1)
        c = np.sum(ol * ol, axis=1) - r * r
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        p = ol + np.where(np.isfinite(t), t, 0.0)[:, None] * dl
        n_local = p / r
    else:
        h = np.asarray(prim.extent)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
            ta = (-h - ol) * inv
            tb = (h - ol) * inv
        par = dl == 0
        inside = np.abs(ol) <= h
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
        tn = tmin.max(axis=1)
        tf = tmax.min(axis=1)
        axis_n = np.argmax(tmin, axis=1)
        axis_f = np.argmin(tmax, axis=1)
        use_far = tn <= 0
        t = np.where(use_far, tf, tn)
        t = np.where((tf >= tn) & (t > 0), t, np.inf)
        ax = np.where(use_far, axis_f, axis_n)
        p = ol + np.where(np.isfinite(t), t, 0.0)[:, None] * dl
        rows = np.arange(len(ol))
        n_local[rows, ax] = np.sign(p[rows, ax])
    n = n_local @ R.T
    return t, n


def sdf(prim: Primitive, x):
    """Signed distance (negative inside) of world points ``x``."""
    xl = (np.asarray(x, dtype=np.float64) - prim.pose.translation) @ prim.pose.R
    if prim.kind == "sphere":
        return np.linalg.norm(xl, axis=-1) - prim.extent[0]
    if prim.kind == "plane":
        hx, hy = prim.extent
        lateral = np.maximum(np.abs(xl[..., 0]) - hx, np.abs(xl[..., 1]) - hy)
        return np.maximum(xl[..., 2], lateral)
    q = np.abs(xl) - np.asarray(prim.extent)
    out = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    return out + np.minimum(q.max(axis=-1), 0.0)


def trace(primitives: Sequence[Primitive], o, d, max_range=np.inf):
    """Closest hit over all primitives: ``(t, normal, index)`` with ``t = 0``, index -1 on miss."""
    o = np.asarray(o, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(o), np.inf)
    normal = np.zeros_like(o)
    idx = np.full(len(o), -1, dtype=np.int64)
    for k, prim in enumerate(primitives):
        t, n = intersect(prim, o, d)
        closer = t < best
        best = np.where(closer, t, best)
        normal[closer] = n[closer]
        idx[closer] = k
    hit = best <= max_range
    # face the incoming ray
    flip = np.sum(normal * d, axis=1) > 0
    normal[flip] *= -1
    return np.where(hit, best, 0.0), np.where(hit[:, None], normal, 0.0), np.where(hit, idx, -1)


# ---------------------------------------------------------------------------
# scans
# ---------------------------------------------------------------------------

def synthesize_scan(spec: SceneSpec, frame: int) -> SynthScan:
    intr = spec.intrinsics
    H, W = intr.height, intr.width
    p0, p1 = spec.frame_poses(frame)
    if spec.shutter:
        poses = [interpolate_pose(p0, p1, float(t)) for t in column_times(W, spec.reverse)]
    else:
        poses = [p0] * W
    Rc = quat_to_matrix(np.stack([p.rotation for p in poses]))
    tc = np.stack([p.translation for p in poses])
    o_s, d_s = sensor_rays(intr)
    o_w = np.einsum("wab,hwb->hwa", Rc, o_s) + tc[None]
    d_w = np.einsum("wab,hwb->hwa", Rc, d_s)
    t, n_w, prim = trace(spec.primitives, o_w.reshape(-1, 3), d_w.reshape(-1, 3), spec.max_range)
    t = t.reshape(H, W)
    prim = prim.reshape(H, W)
    hit = prim >= 0
    n_w = n_w.reshape(H, W, 3)
    normals = np.einsum("wba,hwb->hwa", Rc, n_w)
    cos = np.where(hit, np.clip(-np.sum(n_w * d_w, axis=-1), 0.0, 1.0), np.nan)
    base = np.array([p.base_intensity for p in spec.primitives] + [0.0])[prim]
    refl = np.array([p.reflectivity for p in spec.primitives] + [0.0])[prim]
    ring = np.broadcast_to(np.arange(H)[:, None], (H, W))
    inten = apply_model(base, t, np.nan_to_num(cos, nan=1.0), refl, ring, spec.params, spec.effects)
    inten = np.where(hit, np.clip(inten, 0.0, 1.0), 0.0)
    truth = RangeImage(t, inten)

    rng = np.random.default_rng([spec.seed, frame])
    dn = rng.normal(0.0, 1.0, (H, W)) * spec.noise.depth
    inn = rng.normal(0.0, 1.0, (H, W)) * spec.noise.intensity
    t_obs = np.where(hit, np.maximum(t + dn, 1e-3), 0.0)
    i_obs = np.where(hit, np.clip(inten + inn, 0.0, 1.0), 0.0)
    image = RangeImage(t_obs, i_obs)

    ii, jj = np.nonzero(hit)
    pts = o_s[ii, jj] + t_obs[ii, jj, None] * d_s[ii, jj]
    times = column_times(W, spec.reverse)
    cloud = PointCloud(pts, i_obs[ii, jj], ii, jj, times[jj])
    return SynthScan(cloud, image, truth, normals, cos, prim, p0, p1)


def raw_scan_order(scan: SynthScan) -> PointCloud:
    """The scan as a raw sensor dump: ring by ring, azimuth sweeping once per ring, no indices."""
    c = scan.cloud
    order = np.lexsort((c.col, c.ring))
    return PointCloud(c.positions[order], c.intensity[order])


# ---------------------------------------------------------------------------
# voxelization
# ---------------------------------------------------------------------------

def voxelize(primitives: Sequence[Primitive], dims, cell_size, origin, density=40.0):
    """Voxel field of the scene.

    Density ramps linearly from 0 at the surface to ``density`` one cell deep
    inside a solid; value channels copy the nearest primitive.
    """
    from ..field.grid import VoxelField

    fld = VoxelField.empty(dims, cell_size, origin)
    x = fld.cell_centers().reshape(-1, 3)
    dist = np.stack([sdf(p, x) for p in primitives])
    k = np.argmin(dist, axis=0)
    best = dist[k, np.arange(len(x))]
    sigma = density * np.clip(-best / cell_size, 0.0, 1.0)
    base = np.array([p.base_intensity for p in primitives])[k]
    refl = np.array([p.reflectivity for p in primitives])[k]
    shape = fld.dims
    return fld.with_channels(density=sigma.reshape(shape), intensity=base.reshape(shape),
                             reflectivity=refl.reshape(shape))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def hdl64_like(width=1024, diode_offsets=None, seed=None) -> SensorIntrinsics:
    """Two stacked 32-row units; the upper one is narrower.

    Seeded offsets are drawn from ``U(-2e-3, 2e-3)`` and then stripped of their
    per-unit constant and linear trend, so fov and fov offset stay the
    canonical representatives.
    """
    H = 64
    units = (UnitIntrinsics(0.12, 0.10, 0.10, 0, 32), UnitIntrinsics(0.21, 0.42, -0.10, 32, 64))
    if diode_offsets is None:
        diode_offsets = np.zeros(H)
        if seed is not None:
            diode_offsets = np.random.default_rng(seed).uniform(-2e-3, 2e-3, H)
            for u in units:
                x = np.arange(u.rows) + 0.5
                seg = diode_offsets[u.row_start:u.row_end]
                seg -= np.polyval(np.polyfit(x, seg, 1), x)
    return SensorIntrinsics(width, H, units, diode_offsets)


def _rot_z(angle):
    return np.array([0.0, 0.0, np.sin(angle / 2), np.cos(angle / 2)])


def _rot_y(angle):
    return np.array([0.0, np.sin(angle / 2), 0.0, np.cos(angle / 2)])


def _rot_x(angle):
    return np.array([np.sin(angle / 2), 0.0, 0.0, np.cos(angle / 2)])


def street_primitives(sensor_height=1.73, half_width=8.0, length=40.0):
    """Ground, two facades, a box and a sphere; all within ``length`` meters."""
    g = -sensor_height
    return [
        Primitive("plane", Pose([0.0, 0.0, g]), (length, length), 0.35, 0.30),
        # facades face the street (local +z towards the center line)
        Primitive("plane", Pose([0.0, half_width, 0.0], _rot_x(np.pi / 2)), (length, 6.0), 0.65, 0.15),
        Primitive("plane", Pose([0.0, -half_width, 0.0], _rot_x(-np.pi / 2)), (length, 6.0), 0.55, 0.20),
        Primitive("box", Pose([9.0, 3.5, g + 0.8], _rot_z(0.4)), (1.5, 1.0, 0.8), 0.8, 0.10),
        Primitive("sphere", Pose([-7.0, -4.0, g + 1.0]), (1.0,), 0.5, 0.40),
    ]


def courtyard_primitives(sensor_height=1.73, half=10.0):
    """Ground enclosed by four walls plus a box and a sphere; constrains every pose axis."""
    g = -sensor_height
    walls = [
        Primitive("plane", Pose([0.0, half, 0.0], _rot_x(np.pi / 2)), (half, 6.0), 0.65, 0.15),
        Primitive("plane", Pose([0.0, -half, 0.0], _rot_x(-np.pi / 2)), (half, 6.0), 0.55, 0.20),
        Primitive("plane", Pose([half, 0.0, 0.0], _rot_y(-np.pi / 2)), (6.0, half), 0.45, 0.25),
        Primitive("plane", Pose([-half, 0.0, 0.0], _rot_y(np.pi / 2)), (6.0, half), 0.75, 0.10),
    ]
    return [Primitive("plane", Pose([0.0, 0.0, g]), (half, half), 0.35, 0.30)] + walls + [
        Primitive("box", Pose([4.0, 3.0, g + 0.8], _rot_z(0.4)), (1.5, 1.0, 0.8), 0.8, 0.10),
        Primitive("sphere", Pose([-4.0, -3.5, g + 1.0]), (1.0,), 0.5, 0.40),
    ]


def corridor_primitives(sensor_height=1.73, half_width=7.0, far=55.0):
    """Long corridor with close obstacles so returns span roughly 1 to 60 meters."""
    g = -sensor_height
    L = far + 5.0
    return [
        Primitive("plane", Pose([0.0, 0.0, g]), (L, half_width), 0.35, 0.30),
        Primitive("plane", Pose([0.0, half_width, 0.0], _rot_x(np.pi / 2)), (L, 6.0), 0.65, 0.15),
        Primitive("plane", Pose([0.0, -half_width, 0.0], _rot_x(-np.pi / 2)), (L, 6.0), 0.55, 0.20),
        Primitive("plane", Pose([far, 0.0, 0.0], _rot_y(-np.pi / 2)), (6.0, half_width), 0.6, 0.25),
        Primitive("plane", Pose([-far, 0.0, 0.0], _rot_y(np.pi / 2)), (6.0, half_width), 0.7, 0.10),
        Primitive("box", Pose([1.2, -1.0, g + 1.2]), (0.3, 0.3, 1.2), 0.8, 0.10),
        Primitive("sphere", Pose([-1.5, 1.2, g + 1.0]), (0.6,), 0.5, 0.40),
        Primitive("box", Pose([25.0, 3.0, g + 1.0], _rot_z(0.3)), (2.0, 1.0, 1.0), 0.45, 0.30),
    ]


def street_scene(intr: Optional[SensorIntrinsics] = None, params: Optional[IntensityParams] = None,
                 n_frames=3, speed=1.0, noise: Optional[Noise] = None, seed=0, shutter=True,
                 effects=EFFECTS) -> SceneSpec:
    intr = intr or hdl64_like(256)
    params = params or IntensityParams(laser_powers=np.ones(intr.height))
    traj = [Pose([speed * k, 0.0, 0.0], _rot_z(0.01 * k)) for k in range(n_frames)]
    return SceneSpec(street_primitives(), intr, params, traj, noise or Noise(), seed,
                     effects=effects, shutter=shutter)


def planted_params(height, seed=0, laser=True, distance=True, incidence=True) -> IntensityParams:
    """Ground-truth sensor parameters for synthesis oracles."""
    rng = np.random.default_rng(seed)
    lp = rng.uniform(0.7, 1.3, height) if laser else np.ones(height)
    dist = DistanceParams(s=0.05, q=1.5, d_near=3.0) if distance else DistanceParams()
    a, b = (4.0, 1.5) if incidence else (0.0, 1.0)
    return IntensityParams(dist, lp, a, b)
