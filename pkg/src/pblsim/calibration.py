"""Intrinsics recovery from raw scans with a reprojection loss.

Every point carries the pixel it was recorded in (``ring``, ``col``). For
candidate intrinsics the loss compares that pixel with the one predicted from
the point's coordinates, using four residual channels:

* ``i``: continuous predicted row minus the recorded row center,
* ``j``: continuous predicted column minus the recorded column center
  (independent of the elevation parameters),
* ``d``: squared distance between the point and its reconstruction along the
  recorded row's ray at the measured range,
* ``I``: recorded intensity minus the intensity stored at the predicted pixel
  (piecewise constant, no gradient).

Per-unit ``fov``, ``fov_offset`` and ``delta`` are not jointly identifiable:
adding ``c0 + c1 * x`` (``x`` the relative row position) to the offsets of a
unit can be absorbed into its fov and fov offset. When either of those is
free, the offsets are restricted to the orthogonal complement of that
two-dimensional subspace per unit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geometry import TWO_PI, PointCloud, SensorIntrinsics, UnitIntrinsics
from .optim import Adam, OptimizerConfig

CHANNEL_NAMES = ("d", "I", "i", "j")


@dataclass
class FreeMask:
    """Per-unit toggles plus a per-row toggle for the diode offsets."""

    fov: Sequence[bool]
    fov_offset: Sequence[bool]
    z_offset: Sequence[bool]
    diode_offsets: np.ndarray

    def __post_init__(self):
        self.fov = [bool(v) for v in self.fov]
        self.fov_offset = [bool(v) for v in self.fov_offset]
        self.z_offset = [bool(v) for v in self.z_offset]
        self.diode_offsets = np.asarray(self.diode_offsets, dtype=bool)

    @classmethod
    def all(cls, intr: SensorIntrinsics) -> "FreeMask":
        n = len(intr.units)
        return cls([True] * n, [True] * n, [True] * n, np.ones(intr.height, bool))

    @classmethod
    def none(cls, intr: SensorIntrinsics) -> "FreeMask":
        n = len(intr.units)
        return cls([False] * n, [False] * n, [False] * n, np.zeros(intr.height, bool))

    def count(self) -> int:
        return (sum(self.fov) + sum(self.fov_offset) + sum(self.z_offset)
                + int(np.count_nonzero(self.diode_offsets)))


@dataclass
class CalibProblem:
    frames: Sequence[PointCloud]
    initial: SensorIntrinsics
    free_mask: Optional[FreeMask] = None
    # residual weights for the (d, I, i, j) channels
    loss_weights: Sequence[float] = (1.0, 0.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("need at least one frame")
        if self.free_mask is None:
            self.free_mask = FreeMask.all(self.initial)
        w = np.asarray(self.loss_weights, dtype=np.float64)
        if w.shape != (4,) or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("loss weights must be 4 non-negative values, not all zero")
        self.loss_weights = tuple(float(v) for v in w)
        fm = self.free_mask
        n = len(self.initial.units)
        if not (len(fm.fov) == len(fm.fov_offset) == len(fm.z_offset) == n):
            raise ValueError("free mask does not match the number of units")
        if fm.diode_offsets.shape != (self.initial.height,):
            raise ValueError("free mask diode offsets must have length H")


@dataclass
class CalibReport:
    final: SensorIntrinsics
    loss_history: List[float]
    per_channel_residuals: Dict[str, float]
    initial_loss: float
    best_iteration: int
    evaluations: int

    def history_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,loss\n")
            for k, v in enumerate(self.loss_history):
                fh.write(f"{k},{v!r}\n")


class CalibrationDiverged(RuntimeError):
    def __init__(self, message, state: SensorIntrinsics):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------------------
# ring recovery
# ---------------------------------------------------------------------------

def recover_rings(raw: PointCloud, width: int, height: Optional[int] = None) -> PointCloud:
    """Ring and column indices from scan order.

    Points are assumed to sweep the azimuth once per ring; a new ring starts
    wherever consecutive azimuths jump by more than pi.
    """
    n = len(raw)
    if n == 0:
        raise ValueError("empty point sequence")
    pos = raw.positions
    phi = np.arctan2(pos[:, 1], pos[:, 0])
    jump = np.zeros(n, dtype=np.int64)
    jump[1:] = np.abs(np.diff(phi)) > np.pi
    ring = np.cumsum(jump)
    if height is not None and ring[-1] >= height:
        raise ValueError(f"ring overflow: {ring[-1] + 1} rings for H={height}")
    jc = np.mod((0.5 - phi / TWO_PI) * width, width)
    col = np.minimum(np.floor(jc).astype(np.int64), width - 1)
    return PointCloud(pos, raw.intensity, ring, col, col / width)


def init_from_rings(frames: Sequence[PointCloud], width: int, height: int) -> SensorIntrinsics:
    """Single-unit intrinsics spanning the observed per-ring elevations, ``delta = 0``, ``z = 0``."""
    sums = np.zeros(height)
    counts = np.zeros(height)
    for c in frames:
        if c.ring is None:
            raise ValueError("uncalibrated frame: run recover_rings")
        ok = c.finite & (c.ring >= 0) & (c.ring < height)
        p = c.positions[ok]
        e = np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1]))
        sums += np.bincount(c.ring[ok], e, minlength=height)
        counts += np.bincount(c.ring[ok], minlength=height)
    seen = counts > 0
    if np.count_nonzero(seen) < 2:
        raise ValueError("need at least two populated rings")
    mean = np.where(seen, sums / np.maximum(counts, 1), np.nan)
    rows = np.flatnonzero(seen)
    top, bottom = rows[0], rows[-1]
    # row centers sit at (i + 0.5) / H of the fov, measured from the top
    spacing = (mean[top] - mean[bottom]) / (bottom - top)
    fov = spacing * height
    lowest = mean[bottom] - (height - 0.5 - bottom) * spacing
    return SensorIntrinsics.single(width, height, fov, -lowest)


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------

def _check_frames(frames):
    for c in frames:
        if c.ring is None or c.col is None:
            raise ValueError("uncalibrated frame: run recover_rings")


class _Frame:
    def __init__(self, cloud: PointCloud, intr: SensorIntrinsics):
        keep = cloud.finite & (cloud.ring >= 0) & (cloud.ring < intr.height)
        self.p = cloud.positions[keep]
        self.ring = cloud.ring[keep]
        self.col = cloud.col[keep]
        self.inten = np.nan_to_num(cloud.intensity[keep])
        self.rho = np.hypot(self.p[:, 0], self.p[:, 1])
        phi = np.arctan2(self.p[:, 1], self.p[:, 0])
        self.phi = phi
        W = intr.width
        jr = (0.5 - phi / TWO_PI) * W - self.col - 0.5
        self.rj = np.mod(jr + W / 2, W) - W / 2
        self.unit = intr.unit_of_row[self.ring]
        # recorded intensity image for the I channel, first point wins
        pix = self.ring * W + self.col
        img = np.zeros(intr.height * W)
        order = np.arange(len(pix))[::-1]
        img[pix[order]] = self.inten[order]
        self.img = img
        self.n = len(self.p)


def _unit_arrays(intr: SensorIntrinsics):
    fov = np.array([u.fov for u in intr.units])
    f0 = np.array([u.fov_offset for u in intr.units])
    z = np.array([u.z_offset for u in intr.units])
    rs = np.array([u.row_start for u in intr.units])
    hu = np.array([u.rows for u in intr.units], dtype=np.float64)
    return fov, f0, z, rs, hu


def _frame_terms(fr: _Frame, intr: SensorIntrinsics, weights):
    """Weighted residual rows of one frame.

    Returns the weighted squared-residual sum, mean-absolute bookkeeping, and a
    list of ``(r, G)`` pairs: ``r`` (n,) are sqrt-weighted residuals with
    parameter partials ``G`` (n, 4) ordered ``fov, fov_offset, z_offset, delta``
    of the point's unit and row. Channels without gradient only enter the sum.
    """
    fov, f0, z, rs, hu = _unit_arrays(intr)
    k = fr.unit
    fk, f0k, zk, hk = fov[k], f0[k], z[k], hu[k]
    delta = intr.diode_offsets[fr.ring]
    dz = fr.p[:, 2] - zk
    theta = np.arctan2(dz, fr.rho) + f0k + delta
    i_pred = rs[k] + (1.0 - theta / fk) * hk
    ri = i_pred - (fr.ring + 0.5)
    x = (fr.ring + 0.5 - rs[k]) / hk
    e_row = (1.0 - x) * fk - f0k - delta
    R = np.hypot(fr.rho, dz)
    ce, se = np.cos(e_row), np.sin(e_row)
    cp, sp = np.cos(fr.phi), np.sin(fr.phi)
    u = np.stack([ce * cp, ce * sp, se], axis=1)
    rd = R[:, None] * u - fr.p
    rd[:, 2] += zk
    sq_d = np.sum(rd * rd, axis=1)
    wd, wI, wi, wj = weights
    W = intr.width
    abs_sums = {"d": float(np.sum(np.sqrt(sq_d))), "i": float(np.sum(np.abs(ri))),
                "j": float(np.sum(np.abs(fr.rj))), "I": 0.0}
    const = wj * float(np.sum(fr.rj * fr.rj))
    if wI > 0:
        row = np.floor(i_pred).astype(np.int64)
        colp = np.floor(np.mod((0.5 - fr.phi / TWO_PI) * W, W)).astype(np.int64) % W
        inside = (row >= 0) & (row < intr.height)
        stored = np.where(inside, fr.img[np.clip(row, 0, intr.height - 1) * W + colp], 0.0)
        rI = fr.inten - stored
        const += wI * float(np.sum(rI * rI))
        abs_sums["I"] = float(np.sum(np.abs(rI)))
    rows = []
    if wi > 0:
        s = np.sqrt(wi)
        G = np.empty((fr.n, 4))
        G[:, 0] = theta * hk / fk**2
        G[:, 1] = -hk / fk
        G[:, 2] = hk / fk * fr.rho / (R * R)
        G[:, 3] = G[:, 1]
        rows.append((s * ri, s * G))
    if wd > 0:
        s = np.sqrt(wd)
        du_de = np.stack([-se * cp, -se * sp, ce], axis=1) * R[:, None]
        dR_dz = -dz / R
        for c in range(3):
            G = np.empty((fr.n, 4))
            G[:, 0] = du_de[:, c] * (1.0 - x)
            G[:, 1] = -du_de[:, c]
            G[:, 2] = u[:, c] * dR_dz + (1.0 if c == 2 else 0.0)
            G[:, 3] = G[:, 1]
            rows.append((s * rd[:, c], s * G))
    total = const + sum(float(np.sum(r * r)) for r, _ in rows)
    return total, abs_sums, rows


def _param_index(fr: _Frame, intr: SensorIntrinsics):
    """Full-vector indices (n, 4) of the partials in ``_frame_terms``."""
    nu = len(intr.units)
    k = fr.unit
    return np.stack([k, nu + k, 2 * nu + k, 3 * nu + fr.ring], axis=1)


def _full_vector(intr: SensorIntrinsics) -> np.ndarray:
    fov, f0, z, _, _ = _unit_arrays(intr)
    return np.concatenate([fov, f0, z, intr.diode_offsets])


def _from_full(vec, base: SensorIntrinsics) -> SensorIntrinsics:
    nu = len(base.units)
    units = [UnitIntrinsics(float(vec[k]), float(vec[nu + k]), float(vec[2 * nu + k]),
                            u.row_start, u.row_end) for k, u in enumerate(base.units)]
    return SensorIntrinsics(base.width, base.height, units, np.array(vec[3 * nu:]))


def _loss(intr, frames: List[_Frame], weights, order=0):
    """Mean loss; ``order=1`` adds the full gradient, ``order=2`` also the Gauss-Newton matrix."""
    n = sum(f.n for f in frames)
    if n == 0:
        raise ValueError("no usable points")
    P = 3 * len(intr.units) + intr.height
    total = 0.0
    abs_sums = {c: 0.0 for c in CHANNEL_NAMES}
    grad = np.zeros(P)
    gn = np.zeros((P, P)) if order >= 2 else None
    for fr in frames:
        t, a, rows = _frame_terms(fr, intr, weights)
        total += t
        for c in CHANNEL_NAMES:
            abs_sums[c] += a[c]
        if order == 0:
            continue
        idx = _param_index(fr, intr)
        for r, G in rows:
            for a_ in range(4):
                grad += np.bincount(idx[:, a_], 2.0 * r * G[:, a_], minlength=P)
            if gn is not None:
                for a_ in range(4):
                    for b_ in range(4):
                        lin = idx[:, a_] * P + idx[:, b_]
                        gn.reshape(-1)[:] += np.bincount(lin, 2.0 * G[:, a_] * G[:, b_], minlength=P * P)
    out = [total / n, {c: v / n for c, v in abs_sums.items()}]
    if order >= 1:
        out.append(grad / n)
    if order >= 2:
        out.append(gn / n)
    return tuple(out)


def _split(vec, intr):
    nu = len(intr.units)
    return {"fov": vec[:nu], "fov_offset": vec[nu:2 * nu], "z_offset": vec[2 * nu:3 * nu],
            "diode_offsets": vec[3 * nu:]}


def reprojection_residuals(intr: SensorIntrinsics, frames: Sequence[PointCloud],
                           weights=(1.0, 0.0, 1.0, 1.0)) -> Dict[str, np.ndarray]:
    """Per-point residual channels (for inspection and brute-force checks)."""
    _check_frames(frames)
    out = {c: [] for c in CHANNEL_NAMES}
    for c in frames:
        fr = _Frame(c, intr)
        fov, f0, z, rs, hu = _unit_arrays(intr)
        k = fr.unit
        dz = fr.p[:, 2] - z[k]
        theta = np.arctan2(dz, fr.rho) + f0[k] + intr.diode_offsets[fr.ring]
        i_pred = rs[k] + (1.0 - theta / fov[k]) * hu[k]
        x = (fr.ring + 0.5 - rs[k]) / hu[k]
        e_row = (1.0 - x) * fov[k] - f0[k] - intr.diode_offsets[fr.ring]
        R = np.hypot(fr.rho, dz)
        u = np.stack([np.cos(e_row) * np.cos(fr.phi), np.cos(e_row) * np.sin(fr.phi), np.sin(e_row)], 1)
        org = np.zeros_like(fr.p)
        org[:, 2] = z[k]
        out["d"].append(np.linalg.norm(org + R[:, None] * u - fr.p, axis=1))
        out["i"].append(i_pred - (fr.ring + 0.5))
        out["j"].append(fr.rj)
        out["I"].append(np.zeros(fr.n))
    return {c: np.concatenate(v) for c, v in out.items()}


def reprojection_loss(intr: SensorIntrinsics, frames: Sequence[PointCloud],
                      weights=(1.0, 0.0, 1.0, 1.0)) -> float:
    """Weighted mean over points of the squared residual channels."""
    _check_frames(frames)
    return _loss(intr, [_Frame(c, intr) for c in frames], tuple(weights))[0]


def reprojection_loss_grad(intr: SensorIntrinsics, frames: Sequence[PointCloud],
                           weights=(1.0, 0.0, 1.0, 1.0)):
    """Loss and its gradient w.r.t. ``fov``, ``fov_offset``, ``z_offset`` (per unit) and ``diode_offsets``."""
    _check_frames(frames)
    loss, _, g = _loss(intr, [_Frame(c, intr) for c in frames], tuple(weights), order=1)
    return loss, _split(g, intr)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def gauge_basis(intr: SensorIntrinsics) -> np.ndarray:
    """``H x H`` projector removing per-unit constant and linear trends from the offsets."""
    H = intr.height
    P = np.eye(H)
    for u in intr.units:
        rows = np.arange(u.row_start, u.row_end)
        x = (rows + 0.5 - u.row_start) / u.rows
        B = np.stack([np.ones_like(x), x], axis=1) if u.rows > 1 else np.ones((1, 1))
        Q, _ = np.linalg.qr(B)
        blk = np.eye(u.rows) - Q @ Q.T
        P[np.ix_(rows, rows)] = blk
    return P


def absorb_gauge(intr: SensorIntrinsics) -> SensorIntrinsics:
    """Equivalent intrinsics whose offsets have no per-unit constant or linear trend."""
    units = []
    delta = intr.diode_offsets.copy()
    for u in intr.units:
        rows = np.arange(u.row_start, u.row_end)
        x = (rows + 0.5 - u.row_start) / u.rows
        if u.rows > 1:
            c1, c0 = np.polyfit(x, delta[rows], 1)
        else:
            c1, c0 = 0.0, float(delta[rows][0])
        delta[rows] -= c0 + c1 * x
        units.append(UnitIntrinsics(u.fov + c1, u.fov_offset + c0 + c1, u.z_offset,
                                    u.row_start, u.row_end))
    return SensorIntrinsics(intr.width, intr.height, units, delta)


def _reduction(intr: SensorIntrinsics, mask: FreeMask, gauge: bool):
    """Matrix ``D`` with ``full = full0 + D @ theta`` and the slice of each group in ``theta``."""
    nu = len(intr.units)
    P = 3 * nu + intr.height
    cols = []
    groups = {}
    for g, (name, flags) in enumerate((("fov", mask.fov), ("fov_offset", mask.fov_offset),
                                       ("z_offset", mask.z_offset))):
        start = len(cols)
        for k, on in enumerate(flags):
            if on:
                c = np.zeros(P)
                c[g * nu + k] = 1.0
                cols.append(c)
        if len(cols) > start:
            groups[name] = slice(start, len(cols))
    free_rows = np.flatnonzero(mask.diode_offsets)
    if len(free_rows):
        if gauge:
            U, sv, _ = np.linalg.svd(gauge_basis(intr)[:, free_rows], full_matrices=False)
            B = U[:, sv > 1e-9]
        else:
            B = np.eye(intr.height)[:, free_rows]
        start = len(cols)
        for b in B.T:
            c = np.zeros(P)
            c[3 * nu:] = b
            cols.append(c)
        if len(cols) > start:
            groups["diode_offsets"] = slice(start, len(cols))
    D = np.stack(cols, axis=1) if cols else np.zeros((P, 0))
    return D, groups


def calibrate(problem: CalibProblem, opt: Optional[OptimizerConfig] = None,
              refine_iterations: int = 30) -> CalibReport:
    """Adam on the reprojection loss, then damped Gauss-Newton from the best iterate.

    The report carries the best iterate seen by either stage.
    ``refine_iterations=0`` disables the second stage.
    """
    opt = opt or OptimizerConfig()
    intr0 = problem.initial
    mask = problem.free_mask
    _check_frames(problem.frames)
    frames = [_Frame(c, intr0) for c in problem.frames]
    weights = problem.loss_weights
    if mask.count() == 0:
        loss, res = _loss(intr0, frames, weights)
        return CalibReport(intr0, [loss], res, loss, 0, 1)

    gauge = bool(mask.diode_offsets.any() and (any(mask.fov) or any(mask.fov_offset)))
    base = absorb_gauge(intr0) if gauge else intr0
    full0 = _full_vector(base)
    D, groups = _reduction(intr0, mask, gauge)
    theta = np.zeros(D.shape[1])
    raw = {k: theta[sl].copy() for k, sl in groups.items()}

    def decode(th):
        return _from_full(full0 + D @ th, base)

    def assemble(r):
        th = np.zeros(D.shape[1])
        for k, sl in groups.items():
            th[sl] = r[k]
        return th

    history: List[float] = []
    best = [np.inf, -1, base, None, theta]
    last = [base]

    def evaluate(th, order):
        try:
            intr = decode(th)
        except ValueError as exc:
            raise CalibrationDiverged(f"invalid intrinsics at evaluation {len(history)}: {exc}", last[0])
        out = _loss(intr, frames, weights, order)
        if not np.isfinite(out[0]):
            raise CalibrationDiverged(f"non-finite loss at evaluation {len(history)}", last[0])
        last[0] = intr
        history.append(out[0])
        if out[0] < best[0]:
            best[:] = [out[0], len(history) - 1, intr, out[1], th.copy()]
        return out

    adam = Adam(opt)
    for it in range(opt.iterations + 1):
        th = assemble(raw)
        if it == opt.iterations:
            evaluate(th, 0)
            break
        _, _, g = evaluate(th, 1)
        gt = D.T @ g
        adam.step(raw, {k: gt[sl] for k, sl in groups.items()})

    lam = 1e-3
    th = best[4].copy()
    for _ in range(refine_iterations):
        loss, _, g, gn = _loss(decode(th), frames, weights, 2)
        gt = D.T @ g
        Ht = D.T @ gn @ D
        diag = np.diag(Ht).copy()
        diag[diag <= 0] = 1.0
        improved = False
        for _ in range(12):
            try:
                step = np.linalg.solve(Ht + lam * np.diag(diag), -gt)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            try:
                trial = evaluate(th + step, 0)[0]
            except CalibrationDiverged:
                trial = np.inf
            if trial < loss:
                th = th + step
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 4.0
        if not improved or loss - trial <= 1e-15 * max(loss, 1e-300):
            break
    return CalibReport(best[2], history, best[3], history[0], best[1], len(history))
