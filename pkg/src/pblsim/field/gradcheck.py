"""Analytic gradients versus central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from ..sensor_model import (DistanceParams, IntensityParams, apply_model, apply_model_grad, n_distance,
                            n_distance_grad, n_incidence, n_incidence_grad)
from .grid import CHANNELS, VALUE_CHANNELS, VoxelField
from .render import backprop_rays, render_rays

REL_FLOOR = 1e-5


def rel_error(a, n, floor=REL_FLOOR):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckReport:
    selector: str
    n_points: int
    n_compared: int
    max_rel_error: float
    max_abs_error: float
    worst: str = ""
    all_zero: bool = False

    def passed(self, tol=1e-4) -> bool:
        return self.max_rel_error < tol


class _Acc:
    def __init__(self):
        self.n = 0
        self.rel = 0.0
        self.abs = 0.0
        self.worst = ""
        self.nonzero = False

    def add(self, label, analytic, numeric):
        a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
        n = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
        r = rel_error(a, n)
        self.n += a.size
        self.nonzero |= bool(np.any(a != 0) or np.any(n != 0))
        self.abs = max(self.abs, float(np.max(np.abs(a - n))))
        k = int(np.argmax(r))
        if r[k] > self.rel or not self.worst:
            self.rel = max(self.rel, float(r[k]))
            self.worst = f"{label}[{k}]: analytic {a[k]!r} numeric {n[k]!r}"

    def report(self, name, points):
        return GradCheckReport(name, points, self.n, self.rel, self.abs, self.worst, not self.nonzero)


def _central(f, x0, h):
    return (f(x0 + h) - f(x0 - h)) / (2.0 * h)


# ---------------------------------------------------------------------------
# sensor model
# ---------------------------------------------------------------------------

_DIST_FREE = ("s", "q", "d_near", "s_eta", "q_eta", "k_steep")


def _random_distance(rng) -> DistanceParams:
    return DistanceParams(s=rng.uniform(0.01, 0.08), q=rng.uniform(0.6, 2.5), d_near=rng.uniform(1.0, 5.0),
                          s_eta=rng.uniform(0.2, 0.8), q_eta=rng.uniform(1.0, 3.0),
                          k_steep=rng.uniform(0.5, 3.0))


def _far_reach(p: DistanceParams):
    """Range where the far branch hits its zero clamp (inf when it never does)."""
    if p.q <= 1.0:
        return np.inf
    return p.d_near + (((p.q - 1.0) / p.q) ** (-p.q / 2.0) - 1.0) / p.s


def _random_range(rng, p: DistanceParams):
    reach = _far_reach(p)
    while True:
        d = rng.uniform(0.5, 60.0)
        # keep a margin from the clamp kink and the delta floor
        if abs(d - reach) > 0.5 and p.s * (d - p.d_near) + 1.0 > 0.05:
            return d


def _check_distance(rng, n, h, acc):
    for _ in range(n):
        p = _random_distance(rng)
        d = _random_range(rng, p)
        _, g = n_distance_grad(np.array([d]), p)
        for key in _DIST_FREE:
            x0 = getattr(p, key)
            num = _central(lambda v: n_distance(np.array([d]), _replace(p, key, v))[0], x0, h)
            acc.add(f"n_distance.{key}", g[key][0], num)
        num = _central(lambda v: n_distance(np.array([v]), p)[0], d, h)
        acc.add("n_distance.d", g["d"][0], num)


def _replace(p, key, v):
    return DistanceParams(**{**p.__dict__, key: v})


def _random_intensity_params(rng, height=8) -> IntensityParams:
    return IntensityParams(_random_distance(rng), rng.uniform(0.7, 1.3, height),
                           rng.uniform(0.5, 8.0), rng.uniform(0.5, 2.5), 0.0, rng.uniform(0.5, 2.0))


def _check_incidence(rng, n, h, acc):
    for _ in range(n):
        p = _random_intensity_params(rng)
        c = rng.uniform(0.05, 1.0)
        R = rng.uniform(0.05, 1.0)
        _, g = n_incidence_grad(np.array([c]), np.array([R]), p)
        for key in ("incidence_a", "incidence_b", "reflect_scale"):
            x0 = getattr(p, key)
            num = _central(lambda v: n_incidence(c, R, p.replace(**{key: v})), x0, h)
            acc.add(f"n_incidence.{key}", g[key][0], num)
        acc.add("n_incidence.cos", g["cos"][0], _central(lambda v: n_incidence(v, R, p), c, h))
        acc.add("n_incidence.R", g["R"][0], _central(lambda v: n_incidence(c, v, p), R, h))


def _check_apply_model(rng, n, h, acc):
    for _ in range(n):
        p = _random_intensity_params(rng)
        I = rng.uniform(0.1, 1.0)
        d = _random_range(rng, p.distance)
        c = rng.uniform(0.05, 1.0)
        R = rng.uniform(0.05, 1.0)
        ring = int(rng.integers(0, len(p.laser_powers)))
        _, g = apply_model_grad(I, d, c, R, ring, p)

        def f(**kw):
            args = dict(I=I, d=d, c=c, R=R, p=p)
            args.update(kw)
            return float(apply_model(args["I"], args["d"], args["c"], args["R"], ring, args["p"]))

        for key in _DIST_FREE:
            x0 = getattr(p.distance, key)
            num = _central(lambda v: f(p=p.replace(distance=_replace(p.distance, key, v))), x0, h)
            acc.add(f"apply_model.{key}", g[key], num)
        for key in ("incidence_a", "incidence_b", "reflect_scale"):
            num = _central(lambda v: f(p=p.replace(**{key: v})), getattr(p, key), h)
            acc.add(f"apply_model.{key}", g[key], num)

        def with_power(v):
            lp = p.laser_powers.copy()
            lp[ring] = v
            return f(p=p.replace(laser_powers=lp))

        acc.add("apply_model.laser", g["laser"], _central(with_power, p.laser_powers[ring], h))
        acc.add("apply_model.I", g["I"], _central(lambda v: f(I=v), I, h))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _ray_loss(fld, o, d, up, offsets):
    out = render_rays(fld, o, d, offsets=offsets, skip_empty=False)
    return (float(np.sum(up["depth"] * out.depth)) + float(np.sum(up["residual"] * out.residual))
            + sum(float(np.sum(up[c] * out.channel(c))) for c in VALUE_CHANNELS))


def _random_upstream(rng, n_rays):
    return {k: rng.normal(size=n_rays) for k in ("depth", "residual") + VALUE_CHANNELS}


def _check_render_cells(rng, n, h, acc):
    """Three cells along x, one ray through their centers; every channel of every cell."""
    for _ in range(n):
        dims = (3, 1, 1)
        fld = VoxelField(dims, 1.0, (0.0, 0.0, 0.0), rng.uniform(0.1, 3.0, dims),
                         rng.uniform(0, 1, dims), rng.uniform(0, 1, dims), rng.uniform(0, 1, dims))
        o = np.array([[-1.0, 0.5, 0.5]])
        d = np.array([[1.0, 0.0, 0.0]])
        off = np.array([rng.uniform(-0.5, 0.5)])
        up = _random_upstream(rng, 1)
        g = backprop_rays(fld, o, d, up, offsets=off)
        for c in CHANNELS:
            base = getattr(fld, c)
            for cell in range(3):
                def f(v):
                    a = base.copy()
                    a[cell, 0, 0] = v
                    return _ray_loss(fld.with_channels(**{c: a}), o, d, up, off)
                acc.add(f"render_ray.{c}", g[c][cell], _central(f, base[cell, 0, 0], h))


def _check_render_rays(rng, n, h, acc):
    """Random rays through a small field with an empty border; origin and direction gradients."""
    for _ in range(n):
        dims = (5, 5, 5)
        dens = rng.uniform(0.0, 1.5, dims)
        dens[[0, -1], :, :] = 0.0
        dens[:, [0, -1], :] = 0.0
        dens[:, :, [0, -1]] = 0.0
        fld = VoxelField(dims, 1.0, (0.0, 0.0, 0.0), dens, rng.uniform(0, 1, dims),
                         rng.uniform(0, 1, dims), rng.uniform(0, 1, dims))
        target = rng.uniform(1.5, 3.5, 3)
        dvec = rng.normal(size=3)
        dvec /= np.linalg.norm(dvec)
        o = (target - 6.0 * dvec)[None]
        d = dvec[None]
        off = np.array([rng.uniform(-0.5, 0.5)])
        up = _random_upstream(rng, 1)
        g = backprop_rays(fld, o, d, up, offsets=off, want=(), want_rays=True)
        for name, base in (("origins", o), ("dirs", d)):
            for a in range(3):
                def f(v):
                    x = base.copy()
                    x[0, a] = v
                    oo, dd = (x, d) if name == "origins" else (o, x)
                    return _ray_loss(fld, oo, dd, up, off)
                acc.add(f"render_rays.{name}", g[name][0, a], _central(f, base[0, a], h))


def _check_zero(rng, n, h, acc):
    """All upstream weights masked: both gradients vanish."""
    for _ in range(n):
        dims = (3, 1, 1)
        fld = VoxelField(dims, 1.0, (0.0, 0.0, 0.0), rng.uniform(0.1, 3.0, dims),
                         rng.uniform(0, 1, dims), rng.uniform(0, 1, dims), rng.uniform(0, 1, dims))
        o = np.array([[-1.0, 0.5, 0.5]])
        d = np.array([[1.0, 0.0, 0.0]])
        up = {k: np.zeros(1) for k in ("depth", "residual") + VALUE_CHANNELS}
        g = backprop_rays(fld, o, d, up)
        for cell in range(3):
            def f(v):
                a = fld.density.copy()
                a[cell, 0, 0] = v
                return _ray_loss(fld.with_channels(density=a), o, d, up, None)
            acc.add("zero.density", g["density"][cell], _central(f, fld.density[cell, 0, 0], h))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _check_reprojection(rng, n, h, acc):
    from ..calibration import reprojection_loss, reprojection_loss_grad
    from ..geometry import UnitIntrinsics
    from ..io.synth import hdl64_like, street_scene, synthesize_scan

    truth = hdl64_like(128, seed=int(rng.integers(1 << 30)))
    spec = street_scene(truth, n_frames=1, shutter=False)
    frames = [synthesize_scan(spec, 0).cloud]
    for _ in range(n):
        units = [UnitIntrinsics(u.fov * rng.uniform(0.95, 1.05), u.fov_offset + rng.uniform(-0.01, 0.01),
                                u.z_offset + rng.uniform(-0.05, 0.05), u.row_start, u.row_end)
                 for u in truth.units]
        intr = truth.replace(units=units,
                             diode_offsets=truth.diode_offsets + rng.uniform(-1e-3, 1e-3, truth.height))
        _, g = reprojection_loss_grad(intr, frames)
        k = int(rng.integers(len(units)))
        for key in ("fov", "fov_offset", "z_offset"):
            def f(v):
                us = list(intr.units)
                u = us[k]
                vals = {"fov": u.fov, "fov_offset": u.fov_offset, "z_offset": u.z_offset, key: v}
                us[k] = UnitIntrinsics(vals["fov"], vals["fov_offset"], vals["z_offset"], u.row_start, u.row_end)
                return reprojection_loss(intr.replace(units=us), frames)
            acc.add(f"reprojection.{key}", g[key][k], _central(f, getattr(intr.units[k], key), h))
        r = int(rng.integers(intr.height))

        def fd(v):
            dl = intr.diode_offsets.copy()
            dl[r] = v
            return reprojection_loss(intr.replace(diode_offsets=dl), frames)

        acc.add("reprojection.diode_offsets", g["diode_offsets"][r], _central(fd, intr.diode_offsets[r], h))


SELECTORS: Dict[str, Callable] = {
    "n_distance": _check_distance,
    "n_incidence": _check_incidence,
    "apply_model": _check_apply_model,
    "render_ray": _check_render_cells,
    "render_rays": _check_render_rays,
    "reprojection": _check_reprojection,
    "zero": _check_zero,
}


def grad_check(selector: str, n_points: int = 100, step: float = 1e-6, seed: int = 0) -> GradCheckReport:
    """Max relative error ``|a - n| / max(|a|, |n|, 1e-5)`` over random points."""
    if selector not in SELECTORS:
        raise ValueError(f"unknown selector {selector!r}; choose from {sorted(SELECTORS)}")
    if n_points < 1:
        raise ValueError("n_points must be positive")
    rng = np.random.default_rng(seed)
    acc = _Acc()
    SELECTORS[selector](rng, n_points, step, acc)
    return acc.report(selector, n_points)
