"""Physically based intensity chain ``I* = I * N_d * N_R * l_ring``.

Every factor has a ``*_grad`` twin returning ``(value, partials)`` where
``partials`` maps parameter names to arrays broadcast against the input.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import RangeImage

DELTA_EPS = 1e-6
EFFECTS = frozenset({"distance", "incidence", "laser"})

# incremented with the number of samples whose falloff base had to be clamped
clamp_events: Counter = Counter()


@dataclass(frozen=True)
class DistanceParams:
    s: float = 0.05
    q: float = 1.0
    d_near: float = 2.0
    s_eta: float = 0.5
    q_eta: float = 2.0
    k_steep: float = 2.0
    near_model: str = "fractional_power"
    # used by the lens-defocus near model only
    lens_scale: float = 0.5
    lens_offset: float = 0.0

    def __post_init__(self):
        if not (self.q > 0 and self.q_eta > 0 and self.s_eta > 0 and self.k_steep > 0):
            raise ValueError("q, q_eta, s_eta and k_steep must be positive")
        if self.d_near < 0 or self.s < 0:
            raise ValueError("d_near and s must be non-negative")
        if self.near_model not in ("fractional_power", "lens_defocus"):
            raise ValueError(f"unknown near model {self.near_model!r}")


@dataclass(frozen=True)
class IntensityParams:
    distance: DistanceParams = field(default_factory=DistanceParams)
    laser_powers: np.ndarray = field(default_factory=lambda: np.ones(64))
    incidence_a: float = 10.0
    incidence_b: float = 2.0
    reflect_target: float = 0.0
    reflect_scale: float = 1.0

    def __post_init__(self):
        lp = np.asarray(self.laser_powers, dtype=np.float64).copy()
        lp.setflags(write=False)
        object.__setattr__(self, "laser_powers", lp)
        if lp.ndim != 1 or not np.all(np.isfinite(lp)) or np.any(lp <= 0):
            raise ValueError("laser powers must be finite and positive")
        if self.incidence_a < 0 or not self.incidence_b > 0:
            raise ValueError("need incidence_a >= 0 and incidence_b > 0")
        if not 0 <= self.reflect_target <= 1:
            raise ValueError("reflect_target must lie in [0, 1]")
        if self.reflect_scale < 0:
            raise ValueError("reflect_scale must be non-negative")

    @classmethod
    def identity(cls, height: int) -> "IntensityParams":
        """Laser powers 1 and reflectivity exponent 0; pair with ``effects`` without distance."""
        return cls(laser_powers=np.ones(height), incidence_a=0.0, incidence_b=1.0)

    def replace(self, **kw) -> "IntensityParams":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# distance falloff
# ---------------------------------------------------------------------------

def _far_base(d, p: DistanceParams):
    delta = p.s * (np.asarray(d, dtype=np.float64) - p.d_near) + 1.0
    low = delta <= 0
    if np.any(low):
        clamp_events["delta_d"] += int(np.count_nonzero(low))
    return np.where(low, DELTA_EPS, delta), low


def dist_far(d, p: DistanceParams):
    """Normalized power falloff ``q * delta^(-2/q) - q + 1`` clamped at zero."""
    delta, _ = _far_base(d, p)
    return np.maximum(p.q * delta ** (-2.0 / p.q) - p.q + 1.0, 0.0)


def dist_far_grad(d, p: DistanceParams):
    delta, low = _far_base(d, p)
    pw = delta ** (-2.0 / p.q)
    raw = p.q * pw - p.q + 1.0
    live = (raw > 0).astype(np.float64)
    dd_delta = np.where(low, 0.0, -2.0 * pw / delta) * live
    d = np.asarray(d, dtype=np.float64)
    grads = {
        "d": dd_delta * p.s,
        "s": dd_delta * (d - p.d_near),
        "d_near": -dd_delta * p.s,
        "q": (pw * (1.0 + 2.0 / p.q * np.log(delta)) - 1.0) * live,
    }
    return np.maximum(raw, 0.0), grads


def dist_near(d, p: DistanceParams):
    d = np.asarray(d, dtype=np.float64)
    if p.near_model == "lens_defocus":
        return 1.0 - np.exp(-p.lens_scale * (d + p.lens_offset) ** 2)
    return p.s_eta * np.maximum(d, 0.0) ** (1.0 / p.q_eta)


def dist_near_grad(d, p: DistanceParams):
    d = np.asarray(d, dtype=np.float64)
    if p.near_model == "lens_defocus":
        x = d + p.lens_offset
        e = np.exp(-p.lens_scale * x * x)
        g = 2.0 * p.lens_scale * x * e
        return 1.0 - e, {"d": g, "lens_offset": g, "lens_scale": x * x * e}
    dp = np.maximum(d, 0.0)
    pos = dp > 0
    safe = np.where(pos, dp, 1.0)
    root = np.where(pos, safe ** (1.0 / p.q_eta), 0.0)
    val = p.s_eta * root
    grads = {
        "d": np.where(pos, val / (p.q_eta * safe), 0.0),
        "s_eta": root,
        "q_eta": np.where(pos, -val * np.log(safe) / p.q_eta**2, 0.0),
    }
    return val, grads


def sigmoid_blend(d, p: DistanceParams):
    x = p.k_steep * (np.asarray(d, dtype=np.float64) - p.d_near)
    # stable for large |x|
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid_blend_grad(d, p: DistanceParams):
    d = np.asarray(d, dtype=np.float64)
    sg = sigmoid_blend(d, p)
    ds = sg * (1.0 - sg)
    return sg, {"d": ds * p.k_steep, "k_steep": ds * (d - p.d_near), "d_near": -ds * p.k_steep}


def n_distance(d, p: DistanceParams):
    """Blend of near-range rise and far-range falloff."""
    sg = sigmoid_blend(d, p)
    return sg * dist_far(d, p) + (1.0 - sg) * dist_near(d, p)


def n_distance_grad(d, p: DistanceParams):
    sg, gs = sigmoid_blend_grad(d, p)
    far, gf = dist_far_grad(d, p)
    near, gn = dist_near_grad(d, p)
    grads: Dict[str, np.ndarray] = {}
    for k, v in gs.items():
        grads[k] = grads.get(k, 0.0) + v * (far - near)
    for k, v in gf.items():
        grads[k] = grads.get(k, 0.0) + sg * v
    for k, v in gn.items():
        grads[k] = grads.get(k, 0.0) + (1.0 - sg) * v
    return sg * far + (1.0 - sg) * near, grads


# ---------------------------------------------------------------------------
# incidence / reflectivity
# ---------------------------------------------------------------------------

def reflect_exponent(R_hat, p: IntensityParams):
    """``a_r * (a * R)^b``."""
    return p.reflect_scale * (p.incidence_a * np.asarray(R_hat, dtype=np.float64)) ** p.incidence_b


def n_incidence(cos_phi_n, R_hat, p: IntensityParams):
    """``cos^(a_r * s(R))`` with ``0^0 = 1``."""
    c = np.asarray(cos_phi_n, dtype=np.float64)
    e = reflect_exponent(R_hat, p)
    return np.where(e == 0, 1.0, np.maximum(c, 0.0) ** e)


def n_incidence_grad(cos_phi_n, R_hat, p: IntensityParams):
    c = np.maximum(np.asarray(cos_phi_n, dtype=np.float64), 0.0)
    R = np.asarray(R_hat, dtype=np.float64)
    a, b, ar = p.incidence_a, p.incidence_b, p.reflect_scale
    aR = a * R
    s = aR ** b
    e = ar * s
    val = np.where(e == 0, 1.0, c ** e)
    cpos = c > 0
    logc = np.log(np.where(cpos, c, 1.0))
    dN_de = np.where(cpos, val * logc, 0.0)
    pos = aR > 0
    safe = np.where(pos, aR, 1.0)
    # d(aR)^b / d(aR)
    ds_daR = np.where(pos, b * safe ** (b - 1.0), 1.0 if b == 1.0 else 0.0)
    grads = {
        "incidence_a": dN_de * ar * ds_daR * R,
        "incidence_b": dN_de * ar * np.where(pos, s * np.log(safe), 0.0),
        "reflect_scale": dN_de * s,
        "R": dN_de * ar * ds_daR * a,
        "cos": np.where(cpos, e * np.where(cpos, c, 1.0) ** (e - 1.0), 0.0),
    }
    return val, grads


# ---------------------------------------------------------------------------
# full chain
# ---------------------------------------------------------------------------

def apply_model(I, d, cos_phi_n, R_hat, ring, p: IntensityParams, effects=EFFECTS):
    """Unclamped ``I*``; callers exporting images clip to ``[0, 1]``."""
    out = np.asarray(I, dtype=np.float64)
    if "distance" in effects:
        out = out * n_distance(d, p.distance)
    if "incidence" in effects:
        out = out * n_incidence(cos_phi_n, R_hat, p)
    if "laser" in effects:
        out = out * p.laser_powers[np.asarray(ring)]
    return out


DISTANCE_KEYS = ("s", "q", "d_near", "s_eta", "q_eta", "k_steep", "lens_scale", "lens_offset")
INCIDENCE_KEYS = ("incidence_a", "incidence_b", "reflect_scale")


def apply_model_grad(I, d, cos_phi_n, R_hat, ring, p: IntensityParams, effects=EFFECTS):
    """``I*`` and its partials.

    Keys: ``I``, ``d``, ``cos``, ``R``, ``laser`` (derivative w.r.t. the power
    of each sample's own ring) plus every distance and incidence parameter.
    """
    I = np.asarray(I, dtype=np.float64)
    shape = np.broadcast(I, np.asarray(d), np.asarray(cos_phi_n), np.asarray(R_hat)).shape
    one = np.ones(shape)
    if "distance" in effects:
        nd, gd = n_distance_grad(d, p.distance)
    else:
        nd, gd = one, {}
    if "incidence" in effects:
        nr, gr = n_incidence_grad(cos_phi_n, R_hat, p)
    else:
        nr, gr = one, {}
    lp = p.laser_powers[np.asarray(ring)] if "laser" in effects else one
    val = I * nd * nr * lp
    grads = {"I": nd * nr * lp * one, "d": 0.0 * one, "cos": 0.0 * one, "R": 0.0 * one}
    for k, v in gd.items():
        grads[k] = I * nr * lp * v * one
    for k, v in gr.items():
        grads[k] = I * nd * lp * v * one
    if "laser" in effects:
        grads["laser"] = I * nd * nr * one
    return val, grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class MaskSet:
    drop_mask: np.ndarray
    intensity_mask: np.ndarray
    incidence_threshold: float = math.radians(85.0)

    def __post_init__(self):
        self.drop_mask = np.asarray(self.drop_mask, dtype=bool)
        self.intensity_mask = np.asarray(self.intensity_mask, dtype=bool)
        if self.drop_mask.shape != self.intensity_mask.shape:
            raise ValueError("mask shapes differ")

    @classmethod
    def empty(cls, height, width, incidence_threshold=math.radians(85.0)) -> "MaskSet":
        z = np.zeros((height, width), dtype=bool)
        return cls(z, z.copy(), incidence_threshold)

    def check(self, height, width):
        if self.drop_mask.shape != (height, width):
            raise ValueError(f"masks are {self.drop_mask.shape}, sensor is {(height, width)}")


def intensity_loss_mask(valid, masks: MaskSet, cos_incidence=None, edge_mask=None):
    """Pixels entering the intensity loss."""
    m = np.asarray(valid, dtype=bool) & ~masks.intensity_mask & ~masks.drop_mask
    if cos_incidence is not None:
        c = np.asarray(cos_incidence, dtype=np.float64)
        m &= np.isfinite(c) & (np.nan_to_num(c, nan=-1.0) > math.cos(masks.incidence_threshold))
    if edge_mask is not None:
        m &= ~np.asarray(edge_mask, dtype=bool)
    return m


def loss_intensity(pred, gt, masks: MaskSet, valid, cos_incidence=None, edge_mask=None):
    """Masked mean squared error; returns ``(loss, n_pixels)``, ``(0.0, 0)`` when all masked."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    m = intensity_loss_mask(valid, masks, cos_incidence, edge_mask)
    n = int(np.count_nonzero(m))
    if n == 0:
        return 0.0, 0
    r = pred[m] - gt[m]
    return float(np.mean(r * r)), n


def loss_laser(l):
    l = np.asarray(l, dtype=np.float64)
    return float(np.mean(np.maximum(l - 1.0, 0.0)))


def loss_laser_grad(l):
    l = np.asarray(l, dtype=np.float64)
    return loss_laser(l), (l > 1.0) / l.size


def lower_median_index(values) -> int:
    values = np.asarray(values, dtype=np.float64)
    k = (len(values) - 1) // 2
    return int(np.argpartition(values, k)[k])


def loss_reflectivity(R_hat, r_t, valid=None):
    """``ReLU(r_t - median(R))`` with the lower median for even counts."""
    R = np.asarray(R_hat, dtype=np.float64)
    vals = R[valid] if valid is not None else R.ravel()
    if vals.size == 0 or r_t <= 0:
        return 0.0
    med = vals[lower_median_index(vals)]
    return float(max(r_t - med, 0.0))


@dataclass(frozen=True)
class LossWeights:
    depth: float = 1.0         # lambda_alpha
    intensity: float = 1.0     # lambda_beta
    raydrop: float = 0.1       # lambda_gamma
    reflectivity: float = 0.01  # lambda_r
    laser: float = 0.01        # lambda_l

    def as_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in ("depth", "intensity", "raydrop", "reflectivity", "laser")}


def loss_total(components: Mapping[str, Union[float, Callable[[], float]]],
               weights: Union[LossWeights, Mapping[str, float]]) -> float:
    """Weighted sum; zero-weight components are never evaluated (callables stay uncalled)."""
    w = weights.as_dict() if isinstance(weights, LossWeights) else dict(weights)
    total = 0.0
    for name, lam in w.items():
        if lam == 0 or name not in components:
            continue
        c = components[name]
        total += lam * (c() if callable(c) else c)
    return float(total)


# ---------------------------------------------------------------------------
# statistical masks
# ---------------------------------------------------------------------------

def _stack(frames: Iterable, attr):
    arrs = [getattr(f, attr) if isinstance(f, RangeImage) else f[attr] for f in frames]
    if not arrs:
        raise ValueError("need at least one frame")
    return np.stack(arrs)


def _fraction_at_least(count, n, threshold):
    return count >= threshold * n - 1e-9


def build_drop_mask(frames: Sequence[RangeImage], threshold: float = 0.98) -> np.ndarray:
    """Pixels invalid in at least ``threshold`` of the frames."""
    valid = _stack(frames, "valid")
    return _fraction_at_least(np.count_nonzero(~valid, axis=0), len(valid), threshold)


def build_intensity_mask(frames: Sequence[RangeImage], zero_fraction_threshold: float = 0.9) -> np.ndarray:
    """Pixels with a valid return but zero intensity in at least the given fraction of frames."""
    valid = _stack(frames, "valid")
    inten = _stack(frames, "intensity")
    hits = np.count_nonzero(valid & (inten == 0), axis=0)
    return _fraction_at_least(hits, len(valid), zero_fraction_threshold)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass
class StatsTable:
    d_edges: np.ndarray
    angle_edges: np.ndarray
    count: np.ndarray   # (n_d, n_angle)
    mean: np.ndarray
    std: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.count == 0

    def rows(self):
        for a in range(len(self.d_edges) - 1):
            for b in range(len(self.angle_edges) - 1):
                yield (self.d_edges[a], self.d_edges[a + 1], self.angle_edges[b],
                       self.angle_edges[b + 1], int(self.count[a, b]), self.mean[a, b], self.std[a, b])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "angle_lo", "angle_hi", "count", "mean", "std"])
            for r in self.rows():
                w.writerow([repr(float(r[0])), repr(float(r[1])), repr(float(r[2])),
                            repr(float(r[3])), r[4], repr(float(r[5])), repr(float(r[6]))])

    def by_angle(self) -> "StatsTable":
        return self._marginal(axis=0)

    def by_distance(self) -> "StatsTable":
        return self._marginal(axis=1)

    def _marginal(self, axis):
        cnt = self.count.sum(axis=axis, keepdims=True)
        s1 = np.nansum(self.mean * self.count, axis=axis, keepdims=True)
        s2 = np.nansum((self.std**2 + self.mean**2) * self.count, axis=axis, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(cnt > 0, s1 / cnt, np.nan)
            std = np.where(cnt > 0, np.sqrt(np.maximum(s2 / cnt - mean**2, 0.0)), np.nan)
        if axis == 0:
            d_edges = self.d_edges[[0, -1]]
            return StatsTable(d_edges, self.angle_edges, cnt, mean, std)
        return StatsTable(self.d_edges, self.angle_edges[[0, -1]], cnt, mean, std)


def analyze_statistics(frames: Sequence[Tuple[RangeImage, np.ndarray]], d_bins, angle_bins) -> StatsTable:
    """Mean/std of measured intensity per (distance bin, incidence-angle bin).

    ``angle_bins`` are incidence-angle edges in radians; the incidence image
    holds ``cos(phi_n)`` (NaN where no normal exists). Empty bins get count 0
    and NaN statistics.
    """
    d_edges = np.asarray(d_bins, dtype=np.float64)
    a_edges = np.asarray(angle_bins, dtype=np.float64)
    ds, angs, vals = [], [], []
    for img, cos_img in frames:
        c = np.asarray(cos_img, dtype=np.float64)
        m = img.valid & np.isfinite(c)
        ds.append(img.depth[m])
        angs.append(np.arccos(np.clip(c[m], 0.0, 1.0)))
        vals.append(img.intensity[m])
    d = np.concatenate(ds) if ds else np.zeros(0)
    a = np.concatenate(angs) if angs else np.zeros(0)
    v = np.concatenate(vals) if vals else np.zeros(0)
    nd, na = len(d_edges) - 1, len(a_edges) - 1
    bi = np.searchsorted(d_edges, d, side="right") - 1
    bj = np.searchsorted(a_edges, a, side="right") - 1
    # closed upper edge on the last bin
    bi = np.where(d == d_edges[-1], nd - 1, bi)
    bj = np.where(a == a_edges[-1], na - 1, bj)
    ok = (bi >= 0) & (bi < nd) & (bj >= 0) & (bj < na)
    flat = bi[ok] * na + bj[ok]
    cnt = np.bincount(flat, minlength=nd * na).astype(np.float64)
    s1 = np.bincount(flat, weights=v[ok], minlength=nd * na)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(cnt > 0, s1 / cnt, np.nan)
        dev = v[ok] - mean[flat]
        s2 = np.bincount(flat, weights=dev * dev, minlength=nd * na)
        std = np.where(cnt > 0, np.sqrt(s2 / np.maximum(cnt, 1)), np.nan)
    shape = (nd, na)
    return StatsTable(d_edges, a_edges, cnt.reshape(shape).astype(np.int64),
                      mean.reshape(shape), std.reshape(shape))
