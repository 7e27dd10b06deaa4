"""Range-view geometry for (multi-unit) spinning LiDAR sensors.

Conventions used throughout the package:

* Quaternions are stored scalar-last, ``(x, y, z, w)``.
* A :class:`Pose` maps sensor coordinates to world coordinates.
* Elevation of a row is measured from the unit's own optical center
  ``(0, 0, z_k)``; ``fov_offset`` is minus the lowest elevation of the unit, so
  ``theta = elevation + fov_offset + delta_i`` lies in ``[0, fov]`` and row
  ``i = row_start + (1 - theta / fov) * rows`` runs top-down.
* Column ``j = (0.5 - phi / 2pi) * W``; column 0 looks backwards (``phi = pi``).
* Rays are generated through pixel centers ``(i + 0.5, j + 0.5)``, projection
  floors continuous coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero quaternion")
    return q / n


def quat_multiply(a, b):
    """Hamilton product ``a * b`` for scalar-last quaternions."""
    ax, ay, az, aw = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bx, by, bz, bw = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ], axis=-1)


def quat_to_matrix(q):
    x, y, z, w = np.moveaxis(quat_normalize(q), -1, 0)
    m = np.empty(np.shape(x) + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - z * w)
    m[..., 0, 2] = 2 * (x * z + y * w)
    m[..., 1, 0] = 2 * (x * y + z * w)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - x * w)
    m[..., 2, 0] = 2 * (x * z - y * w)
    m[..., 2, 1] = 2 * (y * z + x * w)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Rotation matrix to unit quaternion with Shepperd's branch selection.

    The branch is picked from the largest of ``trace, m00, m11, m22`` so the
    divisor never gets close to zero. Output has ``w >= 0``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("expected a 3x3 matrix")
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    k = int(np.argmax([tr, m[0, 0], m[1, 1], m[2, 2]]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
        q = [(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
        q = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s]
    q = quat_normalize(q)
    return -q if q[3] < 0 else q


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def rotvec_to_matrix(w):
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=np.float64)
    th = float(np.linalg.norm(w))
    K = skew(w)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1 - np.cos(th)) / th**2 * K @ K


def rotvec_to_quat(w):
    w = np.asarray(w, dtype=np.float64)
    th = float(np.linalg.norm(w))
    if th < 1e-12:
        return quat_normalize(np.r_[0.5 * w, 1.0])
    return np.r_[np.sin(th / 2) * w / th, np.cos(th / 2)]


def quat_to_rotvec(q):
    q = quat_normalize(q)
    if q[3] < 0:
        q = -q
    s = np.linalg.norm(q[:3])
    if s < 1e-12:
        return 2.0 * q[:3]
    return 2.0 * np.arctan2(s, q[3]) * q[:3] / s


def right_jacobian(w):
    """Right Jacobian of SO(3): ``R(w + d) ~= R(w) exp(J_r(w) d)``."""
    w = np.asarray(w, dtype=np.float64)
    th = float(np.linalg.norm(w))
    K = skew(w)
    if th < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - (1 - np.cos(th)) / th**2 * K
            + (th - np.sin(th)) / th**3 * K @ K)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UnitIntrinsics:
    """One laser block of a spinning sensor.

    ``fov`` and ``fov_offset`` are radians, ``z_offset`` is the height of the
    block's optical center in meters, and rows ``[row_start, row_end)`` belong
    to this block.
    """

    fov: float
    fov_offset: float
    z_offset: float
    row_start: int
    row_end: int

    def __post_init__(self):
        if not self.fov > 0:
            raise ValueError("unit fov must be positive")
        if not self.row_start < self.row_end:
            raise ValueError("unit needs row_start < row_end")

    @property
    def rows(self) -> int:
        return self.row_end - self.row_start

    @property
    def origin(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.z_offset])


@dataclass(frozen=True)
class SensorIntrinsics:
    width: int
    height: int
    units: tuple
    diode_offsets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        d = np.asarray(self.diode_offsets, dtype=np.float64).copy()
        d.setflags(write=False)
        object.__setattr__(self, "diode_offsets", d)
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        if not 1 <= len(self.units) <= 2:
            raise ValueError("one or two units supported")
        if d.shape != (self.height,):
            raise ValueError(f"diode_offsets must have length {self.height}")
        spans = sorted((u.row_start, u.row_end) for u in self.units)
        edge = 0
        for start, end in spans:
            if start != edge:
                raise ValueError("unit rows must partition [0, H)")
            edge = end
        if edge != self.height:
            raise ValueError("unit rows must partition [0, H)")
        max_fov = max(u.fov for u in self.units)
        if not np.all(np.isfinite(d)) or np.any(np.abs(d) >= max_fov):
            raise ValueError("diode offsets must be finite and smaller than the fov")

    @classmethod
    def single(cls, width, height, fov, fov_offset, z_offset=0.0, diode_offsets=None):
        d = np.zeros(height) if diode_offsets is None else diode_offsets
        return cls(width, height, (UnitIntrinsics(fov, fov_offset, z_offset, 0, height),), d)

    def replace(self, **kw) -> "SensorIntrinsics":
        args = dict(width=self.width, height=self.height, units=self.units,
                    diode_offsets=self.diode_offsets)
        args.update(kw)
        return SensorIntrinsics(**args)

    @property
    def unit_of_row(self) -> np.ndarray:
        out = np.empty(self.height, dtype=np.int64)
        for k, u in enumerate(self.units):
            out[u.row_start:u.row_end] = k
        return out

    def row_elevations(self) -> np.ndarray:
        """Elevation of every row's center ray, measured at its unit's origin."""
        e = np.empty(self.height)
        for u in self.units:
            local = np.arange(u.rows) + 0.5
            e[u.row_start:u.row_end] = ((1.0 - local / u.rows) * u.fov - u.fov_offset
                                        - self.diode_offsets[u.row_start:u.row_end])
        return e

    def row_origins(self) -> np.ndarray:
        z = np.array([u.z_offset for u in self.units])[self.unit_of_row]
        return np.stack([np.zeros(self.height), np.zeros(self.height), z], axis=-1)

    def __eq__(self, other):
        if not isinstance(other, SensorIntrinsics):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and self.units == other.units
                and np.array_equal(self.diode_offsets, other.diode_offsets))

    __hash__ = None


@dataclass(frozen=True)
class Pose:
    """Rigid sensor-to-world transform (scalar-last unit quaternion)."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        q = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        t.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, 3], matrix_to_quat(m[:3, :3]))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def apply(self, pts):
        return np.asarray(pts, dtype=np.float64) @ self.R.T + self.translation

    def rotate(self, vecs):
        return np.asarray(vecs, dtype=np.float64) @ self.R.T

    def inverse(self) -> "Pose":
        q = self.rotation * np.array([-1.0, -1.0, -1.0, 1.0])
        return Pose(-quat_to_matrix(q) @ self.translation, q)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose(self.apply(other.translation), quat_multiply(self.rotation, other.rotation))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.translation, other.translation)
                and np.array_equal(self.rotation, other.rotation))

    __hash__ = None


@dataclass
class PointCloud:
    """Points in the sensor frame plus optional range-view bookkeeping."""

    positions: np.ndarray
    intensity: np.ndarray
    ring: Optional[np.ndarray] = None
    col: Optional[np.ndarray] = None
    time_frac: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        fin = self.intensity[np.isfinite(self.intensity)]
        if np.any((fin < 0) | (fin > 1)):
            raise ValueError("intensity must lie in [0, 1]")
        for name in ("ring", "col"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.int64).reshape(n))
        if self.time_frac is not None:
            self.time_frac = np.asarray(self.time_frac, dtype=np.float64).reshape(n)
            if np.any((self.time_frac < 0) | (self.time_frac >= 1)):
                raise ValueError("time_frac must lie in [0, 1)")

    def __len__(self):
        return len(self.positions)

    @property
    def finite(self) -> np.ndarray:
        """Mask of points with finite coordinates (NaN points are kept but flagged)."""
        return np.all(np.isfinite(self.positions), axis=1)

    def subset(self, mask) -> "PointCloud":
        pick = lambda a: None if a is None else a[mask]
        return PointCloud(self.positions[mask], self.intensity[mask], pick(self.ring),
                          pick(self.col), pick(self.time_frac))


@dataclass
class RangeImage:
    depth: np.ndarray
    intensity: np.ndarray
    valid: Optional[np.ndarray] = None
    src_row: Optional[np.ndarray] = None
    src_col: Optional[np.ndarray] = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.depth.ndim != 2 or self.intensity.shape != self.depth.shape:
            raise ValueError("depth and intensity must be matching HxW arrays")
        if not (np.all(np.isfinite(self.depth)) and np.all(np.isfinite(self.intensity))):
            raise ValueError("range image must be finite")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")
        valid = self.depth > 0
        if self.valid is not None and not np.array_equal(np.asarray(self.valid, bool), valid):
            raise ValueError("valid mask must equal depth > 0")
        self.valid = valid

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @classmethod
    def empty(cls, height, width) -> "RangeImage":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


@dataclass(frozen=True)
class ProjectionStats:
    n_points: int
    n_written: int
    n_collisions: int
    n_dropped: int


# ---------------------------------------------------------------------------
# point <-> angle <-> pixel <-> ray
# ---------------------------------------------------------------------------

def angles_from_point(p, unit: UnitIntrinsics, delta_i=0.0):
    """Shifted elevation ``theta`` and azimuth ``phi`` of points seen from ``unit``."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2] - unit.z_offset
    rho = np.hypot(x, y)
    if np.any((rho == 0) & (z == 0)):
        raise ValueError("degenerate point")
    theta = np.arctan2(z, rho) + unit.fov_offset + delta_i
    phi = np.arctan2(y, x)
    if np.ndim(phi) == 0:
        return float(theta), float(phi)
    return theta, phi


def pixel_from_angles(theta, phi, intr: SensorIntrinsics, unit_index: int):
    """Continuous pixel coordinates; ``j`` wraps into ``[0, W)``, ``i`` does not."""
    u = intr.units[unit_index]
    i = u.row_start + (1.0 - np.asarray(theta) / u.fov) * u.rows
    j = np.mod((0.5 - np.asarray(phi) / TWO_PI) * intr.width, intr.width)
    # mod can round up to exactly W for tiny negative inputs
    j = np.where(j >= intr.width, 0.0, j)
    if np.ndim(i) == 0:
        return float(i), float(j)
    return i, j


def column_azimuth(j, width):
    return (0.5 - (np.asarray(j, dtype=np.float64) + 0.5) / width) * TWO_PI


def direction_from_angles(elev, phi):
    ce = np.cos(elev)
    return np.stack([ce * np.cos(phi), ce * np.sin(phi), np.sin(elev)], axis=-1)


def ray_from_pixel(i, j, intr: SensorIntrinsics):
    """Origin and unit direction of the ray through the center of pixel ``(i, j)``."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    if np.any((i < 0) | (i >= intr.height) | (j < 0) | (j >= intr.width)):
        raise IndexError("pixel outside the image")
    elev = intr.row_elevations()[i]
    d = direction_from_angles(elev, column_azimuth(j, intr.width))
    o = intr.row_origins()[i]
    return o, d


def sensor_rays(intr: SensorIntrinsics):
    """All ``H x W`` ray origins and directions in the sensor frame."""
    ii, jj = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    return ray_from_pixel(ii, jj, intr)


def _assign_rows(pos, intr: SensorIntrinsics):
    """Row of every point without ring information; -1 when no row matches.

    For each unit all rows are tested, a row ``i`` matches when the point's
    continuous coordinate (computed with that row's diode offset) floors to
    ``i``. Among matches the one closest to the row center wins.
    """
    n = len(pos)
    best_row = np.full(n, -1, dtype=np.int64)
    best_err = np.full(n, np.inf)
    rho = np.hypot(pos[:, 0], pos[:, 1])
    for u in intr.units:
        zr = pos[:, 2] - u.z_offset
        ok = (rho > 0) | (zr != 0)
        base = np.arctan2(zr, rho) + u.fov_offset
        local = np.arange(u.rows)
        delta = intr.diode_offsets[u.row_start:u.row_end]
        for s in range(0, n, 8192):
            b = base[s:s + 8192, None]
            cont = (1.0 - (b + delta[None, :]) / u.fov) * u.rows
            match = np.floor(cont) == local[None, :]
            err = np.where(match, np.abs(cont - local - 0.5), np.inf)
            k = np.argmin(err, axis=1)
            e = err[np.arange(len(k)), k]
            better = (e < best_err[s:s + 8192]) & ok[s:s + 8192]
            best_err[s:s + 8192][better] = e[better]
            best_row[s:s + 8192][better] = u.row_start + k[better]
    return best_row


def project(cloud: PointCloud, intr: SensorIntrinsics):
    """Z-buffer a sensor-frame cloud into a range image.

    Points carrying a ring index use it as their row; otherwise the row is
    found from the per-unit angles. Range is measured from the owning unit's
    optical center. Returns ``(RangeImage, ProjectionStats)``.
    """
    pos = cloud.positions
    n = len(pos)
    H, W = intr.height, intr.width
    finite = cloud.finite
    if cloud.ring is not None:
        row = np.where((cloud.ring >= 0) & (cloud.ring < H), cloud.ring, -1)
    else:
        row = np.full(n, -1, dtype=np.int64)
        row[finite] = _assign_rows(pos[finite], intr)
    row = np.where(finite, row, -1)
    phi = np.arctan2(pos[:, 1], pos[:, 0])
    jc = np.mod((0.5 - phi / TWO_PI) * W, W)
    col = np.minimum(np.floor(jc).astype(np.int64), W - 1)
    origins = intr.row_origins()[np.clip(row, 0, H - 1)]
    rng = np.linalg.norm(pos - origins, axis=1)
    keep = (row >= 0) & (rng > 0)
    idx = np.flatnonzero(keep)
    pix = row[idx] * W + col[idx]
    order = np.lexsort((idx, rng[idx], pix))  # pixel, then range, then input order
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = idx[order[first]]
    depth = np.zeros(H * W)
    inten = np.zeros(H * W)
    src_row = np.full(H * W, -1, dtype=np.int64)
    src_col = np.full(H * W, -1, dtype=np.int64)
    p = pix_sorted[first]
    depth[p] = rng[win]
    inten[p] = np.nan_to_num(cloud.intensity[win])
    src_row[p] = row[win]
    src_col[p] = col[win]
    img = RangeImage(depth.reshape(H, W), inten.reshape(H, W),
                     src_row=src_row.reshape(H, W), src_col=src_col.reshape(H, W))
    stats = ProjectionStats(n, len(win), int(len(idx) - len(win)), int(n - len(idx)))
    return img, stats


def unproject(img: RangeImage, intr: SensorIntrinsics, poses: Optional[Sequence[Pose]] = None):
    """Back-project every valid pixel; with ``poses`` (one per column) into world frame."""
    ii, jj = np.nonzero(img.valid)
    o, d = ray_from_pixel(ii, jj, intr)
    pts = o + img.depth[ii, jj, None] * d
    if poses is not None:
        if len(poses) != intr.width:
            raise ValueError("need one pose per column")
        R = np.stack([p.R for p in poses])
        t = np.stack([p.translation for p in poses])
        pts = np.einsum("nab,nb->na", R[jj], pts) + t[jj]
    return PointCloud(pts, np.clip(img.intensity[ii, jj], 0, 1), ii, jj, jj / intr.width)


def xyz_image(img: RangeImage, intr: SensorIntrinsics) -> np.ndarray:
    """``H x W x 3`` sensor-frame coordinates (zeros at invalid pixels)."""
    o, d = sensor_rays(intr)
    return np.where(img.valid[..., None], o + img.depth[..., None] * d, 0.0)


# ---------------------------------------------------------------------------
# rolling shutter
# ---------------------------------------------------------------------------

def quat_slerp(q0, q1, t):
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 1 - 1e-12:
        return quat_normalize((1 - t) * q0 + t * q1)
    om = np.arccos(min(dot, 1.0))
    return (np.sin((1 - t) * om) * q0 + np.sin(t * om) * q1) / np.sin(om)


def interpolate_pose(p0: Pose, p1: Pose, t: float, method: str = "nlerp") -> Pose:
    """Pose at fraction ``t`` between ``p0`` and ``p1``.

    Translation is interpolated linearly. Rotation uses normalized linear
    quaternion interpolation on the short arc (``method="nlerp"``) or
    spherical interpolation (``method="slerp"``).
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 0.0:
        return p0
    if t == 1.0:
        return p1
    q0, q1 = p0.rotation, p1.rotation
    dot = float(np.dot(q0, q1))
    if abs(dot) < 1e-12:
        raise ValueError("ambiguous interpolation")
    if dot < 0:
        q1 = -q1
    trans = (1 - t) * p0.translation + t * p1.translation
    if method == "nlerp":
        q = (1 - t) * q0 + t * q1
    elif method == "slerp":
        q = quat_slerp(q0, q1, t)
    else:
        raise ValueError(f"unknown interpolation method {method!r}")
    return Pose(trans, q)


def column_times(width: int, reverse: bool = False) -> np.ndarray:
    j = np.arange(width, dtype=np.float64)
    return (width - 1 - j) / width if reverse else j / width


def shutter_poses(p0: Pose, p1: Pose, width: int, reverse: bool = False,
                  method: str = "nlerp") -> list:
    if width < 1:
        raise ValueError("width must be >= 1")
    return [interpolate_pose(p0, p1, float(t), method) for t in column_times(width, reverse)]
